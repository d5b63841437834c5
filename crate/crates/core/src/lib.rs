//! CPU-native INT4/INT8 quantization toolkit built around a miniature
//! differentiable transformer engine.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense `f32` tensors and tape-based reverse-mode autodiff;
//! * [`quant`] — symmetric/asymmetric quantizers at per-tensor, per-group and
//!   per-token granularity, plus the straight-through fake-quantize op;
//! * [`gemm`] — packed INT4 / INT8 integer matmul with a fused dequantize
//!   epilogue, and its benchmark harness;
//! * [`sparsity`] — magnitude and movement pruning masks, unstructured or
//!   pair-structured (N out of every M weights);
//! * [`model`] — the transformer family (encoder-only, decoder-only,
//!   encoder-decoder) with per-part quantization strategies;
//! * [`distill`] — synthetic tasks and quantization-aware training with
//!   knowledge distillation;
//! * [`analysis`] — positional activation/perplexity diagnostics and
//!   quantization error reports;
//! * [`container`] — the on-disk model format;
//! * [`tune`] — latency-driven per-part strategy search.

pub mod analysis;
pub mod container;
pub mod distill;
pub mod error;
pub mod gemm;
pub mod model;
pub mod quant;
pub mod sparsity;
pub mod tensor;
pub mod tune;

pub use error::{Error, Result};
pub use model::{Arch, LnPlacement, Model, ModelConfig, Part, QuantStrategy};
pub use quant::{Granularity, Mapping, QTensor, QuantParams, QuantScheme};
pub use tensor::{NodeId, Tape, Tensor};
