use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{invalid_arg, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with decoupled weight decay. Moments are keyed by parameter name
/// and materialise as zeros on first use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub first_moment: ParamStore,
    pub second_moment: ParamStore,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, ..Self::default() }
    }

    /// Applies one update at learning rate `lr`. Every gradient is checked
    /// for finiteness before any parameter is touched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let Some(p) = params.get(name) else {
                return invalid_arg(format!("gradient for unknown parameter {name}"));
            };
            if p.len() != g.len() {
                return invalid_arg(format!("gradient length mismatch for {name}"));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!("non-finite gradient in {name}[{i}]")));
            }
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).unwrap();
            let shape = p.shape().to_vec();
            if !self.first_moment.contains(name) {
                self.first_moment.insert(name.clone(), Tensor::zeros(&shape));
                self.second_moment.insert(name.clone(), Tensor::zeros(&shape));
            }
            let m = self.first_moment.get_mut(name).unwrap().data_mut();
            let v = self.second_moment.get_mut(name).unwrap().data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * weight_decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Learning rate after step-based exponential decay:
/// `base * factor^floor(step / interval)`.
pub fn decayed_lr(base: f64, factor: f64, interval: u64, step: u64) -> f64 {
    if interval == 0 {
        return base;
    }
    base * factor.powi((step / interval) as i32)
}
