//! Adam optimizer step with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam hyperparameters. Defaults follow the common (0.9, 0.999, 1e-8) setup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter moment buffers plus the step counter used for bias
/// correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState { m: vec![0.0; numel], v: vec![0.0; numel], t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One in-place Adam update. Rejects non-finite gradients with an error that
/// names the parameter; a zero gradient leaves the parameter untouched.
pub fn adam_step(
    param: &mut Tensor,
    grad: &[f32],
    state: &mut AdamState,
    hp: &AdamHyper,
    name: &str,
) -> Result<()> {
    if grad.len() != param.numel() || state.m.len() != param.numel() {
        return Err(Error::ShapeMismatch {
            context: "adam_step",
            left: vec![param.numel()],
            right: vec![grad.len()],
        });
    }
    if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
        return Err(Error::Training {
            step: state.t as usize,
            message: format!("non-finite gradient {bad} for parameter '{name}'"),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    let data = param.data_mut();
    for i in 0..data.len() {
        let g = grad[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        data[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}
