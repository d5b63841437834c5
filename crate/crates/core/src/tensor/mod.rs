//! Dense row-major `f32` tensors and a tape-based reverse-mode autodiff
//! engine.
//!
//! The submodules split the work three ways:
//!
//! * [`Tensor`] — a plain value type (shape + flat data), no gradient state.
//! * [`Tape`] — records every differentiable op of one forward pass and
//!   replays it backwards; gradients live on tape nodes, not on tensors.
//! * [`ops`] — the standard op set (matmul, linear, layer norm, fused
//!   attention, losses, ...) implemented as methods on `Tape`.
//!
//! Invariants enforced throughout: data length always equals the product of
//! the shape, and no op ever produces NaN or Inf from finite inputs (masked
//! attention uses a large finite fill instead of `-inf`).

mod adam;
pub mod linalg;
pub mod ops;
mod tape;
mod value;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use ops::MaskMode;
pub use tape::{BackwardRule, NodeId, Tape};
pub use value::Tensor;
