//! AdamW with decoupled weight decay.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Scalar};
use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            bail!(InvalidArgument, "learning rate must be > 0, got {}", self.learning_rate);
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(InvalidArgument, "betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            bail!(InvalidArgument, "eps must be > 0 and weight decay >= 0");
        }
        Ok(())
    }
}

/// One AdamW update of a flat parameter slice. `t` is the step number after
/// incrementing (first step is 1).
pub fn adamw_update<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if theta.len() != grad.len() || m.len() != theta.len() || v.len() != theta.len() {
        bail!(Shape, "adamw: parameter {} / grad {} / moments {} {}", theta.len(), grad.len(), m.len(), v.len());
    }
    cfg.validate()?;
    if t == 0 {
        bail!(InvalidArgument, "adamw step counter must be incremented before the update");
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let one = T::one();
    let bc1 = T::of(1.0 - libm::pow(cfg.beta1, t as f64));
    let bc2 = T::of(1.0 - libm::pow(cfg.beta2, t as f64));
    let lr = T::of(cfg.learning_rate);
    let decay = one - lr * T::of(cfg.weight_decay);
    let eps = T::of(cfg.eps);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        theta[i] = theta[i] * decay - lr * (mhat / (vhat.sqrt() + eps));
    }
    Ok(())
}

/// Moments and step counter for a fixed list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    ids: Vec<ParamId>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    /// Optimizer over `ids`; parameters outside this list are never touched.
    pub fn new(config: AdamWConfig, store: &ParamStore<T>, ids: &[ParamId]) -> Result<Self> {
        config.validate()?;
        let m: Vec<Vec<T>> = ids.iter().map(|&id| alloc::vec![T::zero(); store.get(id).value.len()]).collect();
        Ok(Self { config, step: 0, ids: ids.to_vec(), v: m.clone(), m })
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.step += 1;
        for (k, &id) in self.ids.iter().enumerate() {
            let p = store.get_mut(id);
            if p.value.len() != self.m[k].len() {
                bail!(Shape, "parameter {} changed size under the optimizer", p.name);
            }
            let grad = p.grad.data().to_vec();
            adamw_update(p.value.data_mut(), &grad, &mut self.m[k], &mut self.v[k], self.step, &self.config)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_pure_decoupled_decay() {
        let cfg = AdamWConfig::new(1e-3, 5e-4);
        let theta0 = [0.7f64, -1.3, 2.0];
        let mut theta = theta0;
        let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
        adamw_update(&mut theta, &[0.0; 3], &mut m, &mut v, 1, &cfg).unwrap();
        for (a, b) in theta.iter().zip(theta0) {
            assert_eq!(*a, b * (1.0 - 1e-3 * 5e-4));
        }
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let cfg = AdamWConfig::new(0.01, 0.0);
        for g in [1e-3, 0.5, -7.0] {
            let mut theta = [1.0f64];
            adamw_update(&mut theta, &[g], &mut [0.0], &mut [0.0], 1, &cfg).unwrap();
            assert!(((1.0 - theta[0]) - 0.01 * g.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn two_step_trace_matches_hand_computation() {
        let cfg = AdamWConfig { learning_rate: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
        let mut theta = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut theta, &[0.5], &mut m, &mut v, 1, &cfg).unwrap();
        adamw_update(&mut theta, &[-0.2], &mut m, &mut v, 2, &cfg).unwrap();

        // Step 1: m = 0.05, v = 0.00025, mhat = 0.5, vhat = 0.25.
        let t1 = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * (0.5 / (0.5 + 1e-8));
        // Step 2: m = 0.045 - 0.02 = 0.025, v = 0.00024975 + 0.00004 = 0.00028975.
        let m2 = 0.9 * 0.05 + 0.1 * -0.2;
        let v2 = 0.999 * 0.00025 + 0.001 * 0.04;
        let mhat = m2 / (1.0 - 0.81);
        let vhat = v2 / (1.0 - 0.999f64 * 0.999);
        let t2 = t1 * (1.0 - 0.1 * 0.01) - 0.1 * (mhat / (vhat.sqrt() + 1e-8));
        assert!((theta[0] - t2).abs() < 1e-12, "{} vs {}", theta[0], t2);
    }

    #[test]
    fn without_decay_matches_plain_adam() {
        let cfg = AdamWConfig::new(0.05, 0.0);
        let grads = [0.3f64, -0.1, 0.7, 0.2];
        let mut theta = [0.4f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        let (mut am, mut av, mut at) = (0.0f64, 0.0f64, 0.4f64);
        for (t, g) in grads.iter().enumerate() {
            adamw_update(&mut theta, &[*g], &mut m, &mut v, t as u64 + 1, &cfg).unwrap();
            am = 0.9 * am + 0.1 * g;
            av = 0.999 * av + 0.001 * g * g;
            let k = t as i32 + 1;
            at -= 0.05 * (am / (1.0 - 0.9f64.powi(k))) / ((av / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
        }
        assert!((theta[0] - at).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        let cfg = AdamWConfig::new(0.0, 0.0);
        assert!(adamw_update(&mut [1.0f64], &[1.0], &mut [0.0], &mut [0.0], 1, &cfg).is_err());
        let cfg = AdamWConfig::new(0.1, 0.0);
        assert!(adamw_update(&mut [1.0f64, 2.0], &[1.0], &mut [0.0], &mut [0.0], 1, &cfg).is_err());
    }
}
