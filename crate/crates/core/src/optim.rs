//! Decoupled-weight-decay Adam and global-norm gradient clipping.

use guidnoise_tensor::Grads;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Optimizer state, indexed like the parameters of the store it was built for.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0f32; t.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with learning rate `lr`. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64, clip_scale: f32) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::shape(params.len(), self.m.len()));
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2_sqrt = (1.0 / bc2.sqrt()) as f32;
        let decay = (1.0 - lr * c.weight_decay) as f32;
        let eps = c.eps as f32;
        for i in 0..params.len() {
            let Some(g) = grads.get(&params.tensors()[i]) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut p = params.tensors()[i].to_vec();
            for j in 0..p.len() {
                let g = g[j] * clip_scale;
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let denom = v[j].sqrt() * inv_bc2_sqrt + eps;
                p[j] = p[j] * decay - step_size * m[j] / denom;
            }
            params.update(i, p)?;
        }
        Ok(())
    }
}

/// Global L2 norm of every parameter gradient.
pub fn grad_norm(params: &ParamStore, grads: &Grads) -> f64 {
    params
        .tensors()
        .iter()
        .filter_map(|t| grads.get(t))
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Multiplier that brings the global norm down to `max_norm` (1 when already below).
pub fn clip_scale(norm: f64, max_norm: f64) -> f32 {
    if max_norm > 0.0 && norm > max_norm {
        (max_norm / (norm + 1e-6)) as f32
    } else {
        1.0
    }
}
