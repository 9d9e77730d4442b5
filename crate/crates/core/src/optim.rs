//! Adam with linear warmup, linear decay to zero, global gradient-norm
//! clipping, and decoupled weight decay that skips bias parameters.

use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_steps: usize,
}

impl AdamConfig {
    pub fn new(
        learning_rate: f64,
        warmup_fraction: f64,
        weight_decay: f64,
        max_grad_norm: f64,
        total_steps: usize,
    ) -> AdamConfig {
        AdamConfig {
            learning_rate,
            warmup_fraction,
            weight_decay,
            max_grad_norm,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: usize,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Adam {
        let m = params
            .entries()
            .iter()
            .map(|e| Matrix::zeros(e.value.rows(), e.value.cols()))
            .collect();
        let v = params
            .entries()
            .iter()
            .map(|e| Matrix::zeros(e.value.rows(), e.value.cols()))
            .collect();
        Adam { cfg, step: 0, m, v }
    }

    /// Linear warmup to the base rate, then linear decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.cfg.total_steps.max(1) as f64;
        let warmup = (self.cfg.warmup_fraction * total).round().max(0.0);
        let s = step as f64;
        let factor = if s < warmup {
            (s + 1.0) / warmup.max(1.0)
        } else if total > warmup {
            ((total - s) / (total - warmup)).max(0.0)
        } else {
            0.0
        };
        self.cfg.learning_rate * factor
    }

    pub fn step(&mut self, params: &mut ParamStore, mut grads: Gradients) {
        clip_global_norm(&mut grads, self.cfg.max_grad_norm);
        let lr = self.lr_at(self.step);
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);

        for (idx, entry) in params.entries_mut().iter_mut().enumerate() {
            let Some(g) = &grads.by_param[idx] else {
                continue;
            };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let decay = if entry.decay {
                self.cfg.weight_decay
            } else {
                0.0
            };
            let value = entry.value.data_mut();
            let iter = value
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, &gi), (mi, vi)) in iter {
                *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * gi;
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + decay * *w);
            }
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }
}

/// Scale gradients so their global norm does not exceed `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
