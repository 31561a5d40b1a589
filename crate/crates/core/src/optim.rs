//! Adam with bias correction, updating parameter leaves in place.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::Params;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-3, beta1: 0.0, beta2: 0.99, eps: 1e-8 }
    }
}

/// Optimizer state for one parameter group, indexed in visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Learning-rate multipliers for parameters whose name starts with the
    /// given prefix; the first match applies.
    pub lr_multipliers: Vec<(String, f64)>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &dyn Params) -> Self {
        let mut m = Vec::new();
        params.visit("", &mut |_, t| m.push(vec![0.0; t.numel()]));
        let v = m.clone();
        Adam { config, steps: 0, m, v, lr_multipliers: Vec::new() }
    }

    pub fn with_multiplier(mut self, prefix: impl Into<String>, multiplier: f64) -> Self {
        self.lr_multipliers.push((prefix.into(), multiplier));
        self
    }

    fn lr_for(&self, name: &str) -> f64 {
        let mult = self.lr_multipliers.iter().find(|(p, _)| name.starts_with(p.as_str())).map_or(1.0, |m| m.1);
        self.config.lr * mult
    }

    /// Applies one update with `grads` given in the parameters' visiting
    /// order. Parameters are replaced with fresh leaves.
    pub fn step(&mut self, params: &mut dyn Params, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(invalid(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        let mut idx = 0;
        let mut err = None;
        let lrs: Vec<f64> = {
            let mut names = Vec::new();
            params.visit("", &mut |name, _| names.push(name));
            names.iter().map(|n| self.lr_for(n)).collect()
        };
        params.visit_mut("", &mut |name, p| {
            let g = grads[idx].data();
            let lr = lrs[idx];
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            idx += 1;
            if g.len() != m.len() || p.numel() != m.len() {
                err.get_or_insert_with(|| invalid(format!("gradient size mismatch for `{name}`")));
                return;
            }
            let mut data = p.to_vec();
            for i in 0..data.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            *p = Tensor::param(data, p.shape());
        });
        err.map_or(Ok(()), Err)
    }
}

/// Global L2 norm of a gradient list.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm` and returns
/// the norm before clipping. A non-positive `max_norm` leaves them as is.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.detach().mul_scalar(scale);
        }
    }
    norm
}
