//! Bias-corrected Adam.

use super::{TensorError, TensorF};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    /// Fresh state with the standard defaults (beta1 0.9, beta2 0.999,
    /// eps 1e-8).
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn with_hyperparams(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `param` from its accumulated gradient.
/// The gradient slot is consumed (cleared) by the update.
pub fn adam_step(
    param: &mut TensorF,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TensorError> {
    let Some(grad) = param.grad() else {
        return Err(TensorError::MissingGrad { op: "adam_step" });
    };
    if grad.len() != state.m.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            lhs: param.dims().to_vec(),
            rhs: vec![state.m.len()],
        });
    }
    let grad = grad.to_vec();
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let values = param.values_mut();
    for i in 0..grad.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    param.clear_grad();
    Ok(())
}
