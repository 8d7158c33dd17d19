//! Adam with L2 weight decay folded into the gradient.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// First and second moments per parameter plus the shared step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config }
    }

    /// One update of every parameter that has an entry in `grads`.
    pub fn step<T: Real>(
        &self,
        params: &mut ParamStore<T>,
        grads: &[(String, Vec<T>)],
        state: &mut AdamState<T>,
    ) -> Result<()> {
        adam_step(params, grads, state, &self.config)
    }
}

pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[(String, Vec<T>)],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        let p = params
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter `{name}`")))?;
        if p.numel() != g.len() {
            return Err(Error::shape("adam_step", p.shape(), &[g.len()]));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let bc1 = T::lit(1.0 - cfg.beta1.powf(t));
    let bc2 = T::lit(1.0 - cfg.beta2.powf(t));
    let (lr, eps, wd) = (T::lit(cfg.lr), T::lit(cfg.eps), T::lit(cfg.weight_decay));

    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let shape = p.shape().to_vec();
        if state.m.get(name).is_none() {
            state.m.insert(name.clone(), Tensor::zeros(&shape));
            state.v.insert(name.clone(), Tensor::zeros(&shape));
        }
        let m = state.m.get_mut(name).expect("inserted").data_mut();
        let v = state.v.get_mut(name).expect("inserted").data_mut();
        if m.len() != g.len() {
            return Err(Error::shape("adam_step state", &[m.len()], &[g.len()]));
        }
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let grad = gi + wd * *w;
            *mi = b1 * *mi + one_b1 * grad;
            *vi = b2 * *vi + one_b2 * grad * grad;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
