use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// AdamW with linear warmup to a constant learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_eps() -> f64 {
    1e-6
}

impl OptimizerConfig {
    /// Values used for the 400k-pair run (batch 2048, 15 epochs).
    pub fn full_scale() -> Self {
        Self { lr: 1e-4, weight_decay: 0.1, warmup_steps: 1500, beta1: 0.9, beta2: 0.98, eps: 1e-6 }
    }

    /// Desk-scale profile.
    pub fn desk_scale() -> Self {
        Self { lr: 2e-3, weight_decay: 0.1, warmup_steps: 50, beta1: 0.9, beta2: 0.98, eps: 1e-6 }
    }

    /// Learning rate for the `step`-th update (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.lr * step as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step: usize,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { config, step: 0, first_moment: zeros.clone(), second_moment: zeros }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies one update. `grads[i]` belongs to the i-th parameter in store order;
    /// `None` means the parameter took no part in the loss.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<&[f64]>]) -> Result<()> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(Error::dim("optimizer_step", format!("{} grads for {} params", grads.len(), params.len())));
        }
        for ((name, tensor), g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != tensor.numel() {
                    return Err(Error::dim("optimizer_step", format!("`{name}`: grad len {} vs {}", g.len(), tensor.numel())));
                }
                if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of `{name}` at flat index {pos} is {}", g[pos])));
                }
            }
        }
        self.step += 1;
        let cfg = &self.config;
        let lr = cfg.lr_at(self.step);
        let bias1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bias2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let w = params.tensor_mut(i).data_mut();
            for j in 0..w.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                w[j] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * w[j]);
            }
        }
        Ok(())
    }
}
