use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only (norm gains, biases and scalars are exempt).
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            warmup_steps: 0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    /// Linear warm-up to the peak, then constant. `step` is 1-based.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.peak_lr
        } else {
            self.peak_lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// First and second moments for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step.max(1))
    }

    /// One AdamW update with bias correction on every non-frozen parameter. Each of them
    /// must carry a gradient; gradients are left in place (call `zero_grad` afterwards).
    pub fn step(&mut self, params: &mut ParameterSet<T>) -> Result<()> {
        for (_, p) in params.iter() {
            if !p.frozen && p.grad.is_none() {
                return Err(Error::MissingGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let s = self.step as i32;
        let cfg = &self.config;
        let lr = cfg.lr_at(self.step);
        let bc1 = 1.0 - Float::powi(cfg.beta1, s);
        let bc2 = 1.0 - Float::powi(cfg.beta2, s);
        let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
        let (one_b1, one_b2) = (T::c(1.0 - cfg.beta1), T::c(1.0 - cfg.beta2));
        let step_size = T::c(lr / bc1);
        let inv_bc2_sqrt = T::c(1.0 / Float::sqrt(bc2));
        let eps = T::c(cfg.eps);
        for (_, p) in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let grad = p.grad.as_ref().expect("checked above");
            let n = grad.len();
            let mom = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            let decay = if p.value.shape().len() >= 2 && cfg.weight_decay > 0.0 {
                T::c(1.0 - lr * cfg.weight_decay)
            } else {
                T::one()
            };
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(mom.m.iter_mut())
                .zip(mom.v.iter_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let denom = v.sqrt() * inv_bc2_sqrt + eps;
                *w = *w * decay - step_size * *m / denom;
            }
        }
        Ok(())
    }
}
