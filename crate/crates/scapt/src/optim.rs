//! Adam with bias correction and a linear learning-rate warmup.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScaptError};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_steps: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    /// lr ramps linearly over `warmup_steps`, so step 0 applies no update.
    pub fn effective_lr(&self) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 {
            self.config.base_lr
        } else {
            self.config.base_lr * (self.step as f64 / w as f64).min(1.0)
        }
    }

    /// One Adam update over all parameters. Consumes the gradient map; every
    /// parameter must have a gradient of matching shape.
    pub fn step(&mut self, params: &mut ParamSet, grads: &IndexMap<String, Tensor>) -> Result<()> {
        let names: Vec<String> = params.names().cloned().collect();
        for name in &names {
            if !grads.contains_key(name) {
                return Err(ScaptError::Contract(format!(
                    "adam_step: missing gradient for `{name}`"
                )));
            }
        }
        let lr = self.effective_lr();
        let t = (self.step + 1) as f64;
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.epsilon);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for name in &names {
            let grad = &grads[name];
            let value = params.get_mut(name)?;
            if grad.shape != value.shape {
                return Err(ScaptError::ShapeMismatch(format!(
                    "adam_step: grad shape {:?} vs param `{name}` {:?}",
                    grad.shape, value.shape
                )));
            }
            let n = value.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for i in 0..n {
                let g = grad.data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    fn grad_of(v: f64) -> IndexMap<String, Tensor> {
        let mut g = IndexMap::new();
        g.insert("w".to_string(), Tensor::scalar(v));
        g
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut params = single_param(1.5);
        let mut adam = AdamState::new(AdamConfig {
            warmup_steps: 0,
            ..AdamConfig::default()
        });
        for _ in 0..5 {
            adam.step(&mut params, &grad_of(0.0)).unwrap();
        }
        assert_eq!(params.get("w").unwrap().data[0], 1.5);
    }

    #[test]
    fn warmup_step_zero_does_not_move() {
        let mut params = single_param(1.0);
        let mut adam = AdamState::new(AdamConfig {
            warmup_steps: 100,
            ..AdamConfig::default()
        });
        assert_eq!(adam.effective_lr(), 0.0);
        adam.step(&mut params, &grad_of(1.0)).unwrap();
        assert_eq!(params.get("w").unwrap().data[0], 1.0);
    }

    #[test]
    fn warmup_ramps_linearly_and_caps() {
        let mut adam = AdamState::new(AdamConfig {
            base_lr: 1.0,
            warmup_steps: 4,
            ..AdamConfig::default()
        });
        let expected = [0.0, 0.25, 0.5, 0.75, 1.0, 1.0];
        for want in expected {
            assert_eq!(adam.effective_lr(), want);
            adam.step(&mut single_param(0.0), &grad_of(0.0)).unwrap();
        }
    }

    #[test]
    fn matches_scalar_adam_recurrence() {
        let cfg = AdamConfig {
            base_lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_steps: 0,
        };
        let mut params = single_param(1.0);
        let mut adam = AdamState::new(cfg.clone());
        for _ in 0..3 {
            adam.step(&mut params, &grad_of(1.0)).unwrap();
        }
        // hand-rolled recurrence, g = 1 each step
        let mut w = 1.0;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=3u32 {
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * 1.0;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * 1.0;
            let mhat = m / (1.0 - cfg.beta1.powi(t as i32));
            let vhat = v / (1.0 - cfg.beta2.powi(t as i32));
            w -= cfg.base_lr * mhat / (vhat.sqrt() + cfg.epsilon);
        }
        assert!((params.get("w").unwrap().data[0] - w).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut params = single_param(1.0);
        let mut adam = AdamState::new(AdamConfig::default());
        let empty = IndexMap::new();
        assert!(adam.step(&mut params, &empty).is_err());
    }
}
