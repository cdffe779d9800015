//! Bias-corrected Adam.

use super::unet::ParamSet;
use super::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self { m: ParamSet::zeros_like(params), v: ParamSet::zeros_like(params), step: 0 }
    }

    /// `θ ← θ − lr·m̂/(√v̂ + ε)`. Rejects non-finite gradients without
    /// touching any state.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        if grads.tensors.len() != params.tensors.len() {
            return Err(Error::Config("gradient/parameter count mismatch".into()));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(cfg.beta1, t);
        let bc2 = 1.0 - libm::pow(cfg.beta2, t);
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        let (lr, eps) = (T::from_f64(cfg.lr), T::from_f64(cfg.eps));
        for (((p, g), m), v) in
            params.tensors.iter_mut().zip(&grads.tensors).zip(self.m.tensors.iter_mut()).zip(self.v.tensors.iter_mut())
        {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (T::ONE - b1) * g;
                *v = b2 * *v + (T::ONE - b2) * g * g;
                let m_hat = *m * inv_bc1;
                let v_hat = *v * inv_bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
