use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    m: ParamStore,
    v: ParamStore,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    cfg: &AdamConfig,
    state: &mut AdamState,
) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be > 0, got {}", cfg.lr)));
    }
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above");
        if state.m.get(name).map(Tensor::shape) != Some(p.shape()) {
            state.m.insert(name, Tensor::zeros(p.shape()));
            state.v.insert(name, Tensor::zeros(p.shape()));
        }
        let m = state.m.get_mut(name).expect("inserted");
        let v = state.v.get_mut(name).expect("inserted");
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
