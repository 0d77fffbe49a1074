//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::model::Params;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// One Adam update over flat slices; `t` is the 1-based step count.
pub fn adam_update(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64) {
    let c1 = 1.0 - BETA1.powf(t as f64);
    let c2 = 1.0 - BETA2.powf(t as f64);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
}

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Params,
    pub v: Params,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        Self {
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// Advances the step count and applies one update to every tensor.
pub fn adam_step(params: &mut Params, grads: &Params, state: &mut AdamState, lr: f64) -> Result<()> {
    let g = grads.to_vec();
    if let Some((name, _)) = g.iter().find(|(_, m)| !m.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    state.t += 1;
    let t = state.t;
    let slots = params
        .slots_mut()
        .into_iter()
        .zip(state.m.slots_mut())
        .zip(state.v.slots_mut());
    for (((theta, m), v), (_, g)) in slots.zip(&g) {
        adam_update(theta.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice(), t, lr);
    }
    Ok(())
}
