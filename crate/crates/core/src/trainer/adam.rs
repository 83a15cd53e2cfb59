use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Variable};

/// Per-variable first and second moments plus the bias-correction step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of steps applied so far.
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<Tensor>,
    #[serde(skip)]
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(vars: &[Variable]) -> Self {
        let zeros = || vars.iter().map(|v| Tensor::zeros(v.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Moment shapes must line up with the variables they belong to.
    pub fn check(&self, vars: &[Variable]) -> Result<()> {
        if self.m.len() != vars.len() || self.v.len() != vars.len() {
            return Err(Error::dim("adam moments", &[vars.len()], &[self.m.len()]));
        }
        for ((m, v), var) in self.m.iter().zip(&self.v).zip(vars) {
            if m.shape() != var.value.shape() || v.shape() != var.value.shape() {
                return Err(Error::dim("adam moments", var.value.shape(), m.shape()));
            }
        }
        Ok(())
    }
}

/// Bias-corrected Adam update in place, then zeroes the gradients.
///
/// Variables whose gradient is identically zero are left untouched,
/// including their moments. A non-finite gradient aborts the step before
/// anything is modified.
pub fn adam_step(vars: &mut [Variable], state: &mut AdamState, lr: f64) -> Result<()> {
    state.check(vars)?;
    if let Some(bad) = vars.iter().find(|v| !v.grad.is_finite()) {
        return Err(Error::NanGradient(bad.name.clone()));
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - state.beta1.powf(t);
    let c2 = 1.0 - state.beta2.powf(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for ((var, m), v) in vars.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if !var.trainable || var.grad.data().iter().all(|g| *g == 0.0) {
            var.zero_grad();
            continue;
        }
        let grad = var.grad.data();
        let moments = m.data_mut().iter_mut().zip(v.data_mut());
        for ((p, g), (mi, vi)) in var.value.data_mut().iter_mut().zip(grad).zip(moments) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
        var.zero_grad();
    }
    Ok(())
}
