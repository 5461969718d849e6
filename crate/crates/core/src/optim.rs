//! Adam and the per-epoch exponential learning-rate schedule.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update in place. `step` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Element>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    assert!(step >= 1, "adam steps are 1-based");
    assert!(param.len() == grad.len() && m.len() == grad.len() && v.len() == grad.len());
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let c1 = T::from_f64(1.0 - Float::powi(cfg.beta1, step as i32));
    let c2 = T::from_f64(1.0 - Float::powi(cfg.beta2, step as i32));
    let lr = T::from_f64(lr);
    let eps = T::from_f64(cfg.eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        param[i] = param[i] - lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Adam moments for every parameter of a store, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.tensors().iter().map(|t| alloc::vec![T::zero(); t.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients and {} moment buffers for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        for (i, t) in store.tensors_mut().iter_mut().enumerate() {
            if grads[i].len() != t.numel() {
                return Err(Error::shape("adam", &[grads[i].len()], t.shape()));
            }
            adam_update(t.data_mut(), &grads[i], &mut self.m[i], &mut self.v[i], self.step, lr, &self.config);
        }
        Ok(())
    }
}

/// `lr * gamma^epoch`, epochs counted from 0.
pub fn lr_at_epoch(lr: f64, gamma: f64, epoch: usize) -> f64 {
    lr * Float::powi(gamma, epoch as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = [1.0f64, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        for step in 1..=3 {
            adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, step, 0.001, &AdamConfig::default());
        }
        assert_eq!(p, [1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = [0.0f64, 0.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adam_update(&mut p, &[3.0, -0.5], &mut m, &mut v, 1, 0.001, &AdamConfig::default());
        assert!((p[0] + 0.001).abs() < 1e-9);
        assert!((p[1] - 0.001).abs() < 1e-9);
    }

    #[test]
    fn schedule() {
        let lrs: Vec<f64> = (0..3).map(|e| lr_at_epoch(0.001, 0.96, e)).collect();
        assert!((lrs[1] - 0.00096).abs() < 1e-15);
        assert!((lrs[2] - 0.0009216).abs() < 1e-15);
    }
}
