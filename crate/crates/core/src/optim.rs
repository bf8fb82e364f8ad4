//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment estimates, keyed like the parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update at step `t ≥ 1`. Only parameters named in `grads` move,
/// which is how callers freeze subsets.
pub fn adamw_step(
    params: &mut Params,
    grads: &Params,
    state: &mut AdamState,
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if t == 0 {
        return invalid("adam step counter starts at 1");
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (name, g) in grads.iter() {
        let p = params.get_mut(name)?;
        if p.shape() != g.shape() {
            return shape_err(format!("gradient for {name}: {:?} vs {:?}", g.shape(), p.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Diverged(format!("non-finite gradient for {name}")));
        }
        if !state.m.contains(name) {
            state.m.insert(name.clone(), Tensor::zeros(g.shape()));
            state.v.insert(name.clone(), Tensor::zeros(g.shape()));
        }
        let m = state.m.get_mut(name)?;
        for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = state.v.get_mut(name)?;
        for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (state.m.get(name)?.clone(), state.v.get(name)?);
        let decay = 1.0 - lr * cfg.weight_decay;
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let step = (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            *pi = *pi * decay - lr * step;
        }
    }
    Ok(())
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let p = (step.min(total) as f64) / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * p).cos())
}
