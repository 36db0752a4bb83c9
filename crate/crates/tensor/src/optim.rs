use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::Gradients;
use crate::params::ParamStore;

/// Linear warmup from 0 to 1, then cosine decay from 1 to 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            warmup_steps: warmup_steps.min(total_steps),
            total_steps,
        }
    }

    pub fn multiplier(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return step as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return if step == self.total_steps { 1.0 } else { 0.0 };
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Clip the global gradient norm to this value before the update.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            max_grad_norm: None,
        }
    }
}

/// AdamW state: moment buffers, step counter and optional schedule.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub schedule: Option<Schedule>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, schedule: Option<Schedule>, store: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            cfg,
            schedule,
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate the next call to [`AdamW::step`] will use.
    pub fn next_lr(&self) -> f64 {
        let mult = self.schedule.map_or(1.0, |s| s.multiplier(self.step + 1));
        self.cfg.lr * mult
    }

    /// One decoupled-weight-decay update. Returns the learning rate applied.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<f64> {
        if store.len() != self.m.len() {
            return Err(TensorError::InvalidInput(format!(
                "optimizer built for {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (id, g) in grads.params() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::Divergence(format!(
                    "non-finite gradient for {}",
                    store.param(id).name
                )));
            }
        }
        let clip = match self.cfg.max_grad_norm {
            Some(max) => {
                let norm = grads.global_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let lr = self.next_lr();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (idx, param) in store.iter_mut().enumerate() {
            let grad = grads.param(crate::params::ParamId(idx));
            let decay = if param.decay {
                self.cfg.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for (i, p) in param.value.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |g| g[i] * clip);
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + decay * *p);
            }
        }
        Ok(lr)
    }
}
