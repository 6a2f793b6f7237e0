//! Optimizer and learning-rate schedule for the transformer phase:
//! decoupled-weight-decay Adam with linear warmup into cosine decay.

use crate::checkpoint::OptState;
use crate::model::ModelParams;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Cosine decays to `lr * lr_min_ratio`.
    pub lr_min_ratio: f64,
    /// Probability of replacing an item's text with the null embedding.
    pub cfg_dropout: f64,
    pub codec_steps: usize,
    pub codec_lr: f64,
    pub codec_batch: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 50,
            lr_min_ratio: 0.05,
            cfg_dropout: 0.1,
            codec_steps: 600,
            codec_lr: 2e-3,
            codec_batch: 8,
            checkpoint_every: 500,
        }
    }
}

/// Learning rate at 1-based `step`.
pub fn lr_at(step: usize, hyper: &TrainHyper) -> f64 {
    let warm = hyper.warmup_steps.max(1);
    if step <= hyper.warmup_steps {
        return hyper.lr * step as f64 / warm as f64;
    }
    let total = hyper.steps.max(step);
    let progress = (step - hyper.warmup_steps) as f64 / (total - hyper.warmup_steps).max(1) as f64;
    let floor = hyper.lr * hyper.lr_min_ratio;
    floor + 0.5 * (hyper.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub struct AdamW {
    pub state: OptState,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    pub fn new(num_params: usize) -> AdamW {
        AdamW {
            state: OptState {
                step: 0,
                m: vec![0.0; num_params],
                v: vec![0.0; num_params],
            },
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }

    pub fn resume(state: OptState) -> AdamW {
        AdamW {
            state,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }

    /// One update. Weight decay is decoupled and applies only to tensors
    /// flagged for decay.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, wd: f64) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let grad_tensors = grads.tensors();
        let mut offset = 0usize;
        for ((_, p, decay), (_, g, _)) in params.tensors_mut().into_iter().zip(grad_tensors) {
            let m = &mut self.state.m[offset..offset + p.len()];
            let v = &mut self.state.v[offset..offset + p.len()];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                if decay {
                    p[i] -= lr * wd * p[i];
                }
            }
            offset += p.len();
        }
    }
}
