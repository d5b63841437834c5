//! The quantized linear layer used for every enabled part.
//!
//! Train and eval MUST produce bit-identical outputs (the STE parity
//! invariant), so there is exactly one forward value path: quantize the
//! activations token-wise, build the effective quantized weight, and run
//! [`gemm_fused`]. Training differs only in the backward rule, which applies
//! straight-through gradients:
//!
//! * `dx = (g W_hat) .* gate_x` — activation clip gate;
//! * `dW = (g^T x_hat) .* gate_w` — weight clip gate composed with the
//!   pruning mask (prune-then-quant and quant-then-prune share this form);
//! * `db = column sums of g`.
//!
//! One asymmetric corner cannot live on an integer grid: quant-then-prune
//! with an asymmetric weight scheme needs masked positions at exactly 0.0,
//! which the affine grid cannot represent. That case routes the effective
//! weight through the float path of `gemm_fused` (identical in train and
//! eval, so parity still holds).

use crate::error::{Error, Result};
use crate::gemm::{gemm_fused, GemmEpilogue, WeightOperand};
use crate::model::config::{Part, QuantStrategy};
use crate::quant::{quantize, quantize_weight, ste_gate, IntData, Mapping, QTensor};
use crate::sparsity::{CompositionOrder, SparsityMask};
use crate::tensor::linalg::{col_sums, mm, mm_tn};
use crate::tensor::{BackwardRule, NodeId, Tape, Tensor};

#[derive(Debug)]
struct QuantizedLinearRule {
    x_hat: Vec<f32>,
    w_hat: Vec<f32>,
    gate_x: Vec<f32>,
    gate_w: Vec<f32>,
    m: usize,
    k: usize,
    n: usize,
    has_bias: bool,
}

impl BackwardRule for QuantizedLinearRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        let Some(g) = out[0] else {
            return vec![None; if self.has_bias { 3 } else { 2 }];
        };
        let mut dx = mm(g, &self.w_hat, self.m, self.n, self.k);
        for (v, &gate) in dx.iter_mut().zip(&self.gate_x) {
            *v *= gate;
        }
        let mut dw = mm_tn(g, &self.x_hat, self.m, self.n, self.k);
        for (v, &gate) in dw.iter_mut().zip(&self.gate_w) {
            *v *= gate;
        }
        let mut grads = vec![Some(dx), Some(dw)];
        if self.has_bias {
            grads.push(Some(col_sums(g, self.m, self.n)));
        }
        grads
    }
}

/// Effective weight state for one enabled part.
pub struct EffectiveWeight {
    /// Integer (or passthrough) tensor fed to `gemm_fused`.
    pub q: QTensor,
    /// Dequantized effective weight, used by the backward rule.
    pub w_hat: Vec<f32>,
    /// STE gate for the float weight (clip gate composed with mask).
    pub gate_w: Vec<f32>,
}

/// Compose sparsity and weight quantization exactly the way the forward pass
/// will: prune-then-quantize masks before calibrating scales, while
/// quantize-then-prune zeroes codes on the already-frozen grid (falling back
/// to a float passthrough when the asymmetric grid cannot represent zero).
pub fn effective_weight(
    w: &Tensor,
    prequantized: Option<&QTensor>,
    mask: Option<(&SparsityMask, CompositionOrder)>,
    strategy: &QuantStrategy,
) -> Result<EffectiveWeight> {
    let scheme = &strategy.weight_scheme;
    if let Some(qt) = prequantized {
        // Container-materialized integer weights: masks and order were
        // composed when the codes were produced; gradients are not taken
        // through frozen integer weights.
        let w_hat = qt.dequantize().into_data();
        return Ok(EffectiveWeight {
            q: qt.clone(),
            w_hat,
            gate_w: vec![0.0; w.numel()],
        });
    }
    match mask {
        None => {
            let q = quantize_weight(w, scheme)?;
            let w_hat = q.dequantize().into_data();
            Ok(EffectiveWeight { q, w_hat, gate_w: ste_gate(w, scheme) })
        }
        Some((mask, CompositionOrder::PruneThenQuant)) => {
            let wm = mask.apply(w)?;
            let q = quantize_weight(&wm, scheme)?;
            let w_hat = q.dequantize().into_data();
            let mut gate_w = ste_gate(&wm, scheme);
            for (g, &keep) in gate_w.iter_mut().zip(&mask.keep) {
                if !keep {
                    *g = 0.0;
                }
            }
            Ok(EffectiveWeight { q, w_hat, gate_w })
        }
        Some((mask, CompositionOrder::QuantThenPrune)) => {
            let q0 = quantize_weight(w, scheme)?;
            let mut gate_w = ste_gate(w, scheme);
            for (g, &keep) in gate_w.iter_mut().zip(&mask.keep) {
                if !keep {
                    *g = 0.0;
                }
            }
            let representable = scheme.is_passthrough()
                || scheme.mapping == Mapping::Symmetric;
            if representable {
                // Zeroing a symmetric (or float) code keeps the value on
                // grid, so the integer kernel still applies.
                let mut q = q0;
                match &mut q.data {
                    IntData::Signed(v) => {
                        for (c, &keep) in v.iter_mut().zip(&mask.keep) {
                            if !keep {
                                *c = 0;
                            }
                        }
                    }
                    IntData::Float(v) => {
                        for (c, &keep) in v.iter_mut().zip(&mask.keep) {
                            if !keep {
                                *c = 0.0;
                            }
                        }
                    }
                    IntData::Unsigned(_) => unreachable!("symmetric codes are signed"),
                }
                let w_hat = q.dequantize().into_data();
                Ok(EffectiveWeight { q, w_hat, gate_w })
            } else {
                // Asymmetric grid cannot represent 0 exactly: carry the
                // masked dequantized weight as a float passthrough, which
                // gemm_fused multiplies in f32 (same path train and eval).
                let w_hat_t = mask.apply(&q0.dequantize())?;
                let w_hat = w_hat_t.data().to_vec();
                let q = QTensor {
                    shape: q0.shape.clone(),
                    scheme: crate::quant::QuantScheme::passthrough(),
                    params: Default::default(),
                    data: IntData::Float(w_hat.clone()),
                };
                Ok(EffectiveWeight { q, w_hat, gate_w })
            }
        }
    }
}

/// `y = x W^T + b` for one part, honoring the strategy:
///
/// * part disabled — plain float linear (mask, if any, multiplies the weight);
/// * part enabled — token-wise activation quantization and the fused integer
///   GEMM, recorded with straight-through gradients.
#[allow(clippy::too_many_arguments)]
pub(crate) fn quantized_linear(
    tape: &mut Tape,
    x: NodeId,
    w: NodeId,
    bias: Option<NodeId>,
    prequantized: Option<&QTensor>,
    mask: Option<(&SparsityMask, CompositionOrder)>,
    strategy: &QuantStrategy,
    part: Part,
) -> Result<NodeId> {
    if !strategy.enabled(part) {
        // Full float path; a stored integer weight (no float master) is
        // dequantized once and multiplied in float.
        let w_node = match prequantized {
            Some(qt) => tape.constant(qt.dequantize()),
            None => w,
        };
        let w_node = match mask {
            Some((m, _)) => tape.mul_mask(w_node, &m.as_f32())?,
            None => w_node,
        };
        return tape.linear(x, w_node, bias);
    }

    let (m, k) = tape.value(x).dims2("quantized_linear input")?;
    let (n, k2) = tape.value(w).dims2("quantized_linear weight")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            context: "quantized_linear in_features",
            left: vec![m, k],
            right: vec![n, k2],
        });
    }

    let x_val = tape.value(x).clone();
    let x_q = quantize(&x_val, &strategy.activation_scheme)?;
    let gate_x = ste_gate(&x_val, &strategy.activation_scheme);
    let x_hat = x_q.dequantize().into_data();

    let eff = effective_weight(tape.value(w), prequantized, mask, strategy)?;
    let w_op = WeightOperand::Quantized(&eff.q);
    let mut epi = GemmEpilogue::from_operands(&x_q, &w_op)?;
    if let Some(b) = bias {
        epi = epi.with_bias(tape.value(b).data().to_vec());
    }
    let y = gemm_fused(&x_q, &w_op, &epi)?;

    let mut inputs = vec![x, w];
    if let Some(b) = bias {
        inputs.push(b);
    }
    Ok(tape.record1(
        &inputs,
        y,
        Box::new(QuantizedLinearRule {
            x_hat,
            w_hat: eff.w_hat,
            gate_x,
            gate_w: eff.gate_w,
            m,
            k,
            n,
            has_bias: bias.is_some(),
        }),
    ))
}
