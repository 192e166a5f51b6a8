use serde::{Deserialize, Serialize};

use super::params::Params;
use super::ModelConfig;

/// Linear warm-up to `peak`, then cosine decay to `floor` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            peak: 2e-4,
            floor: 2e-5,
            warmup_steps: 1000,
            total_steps: 100_000,
        }
    }
}

impl LrSchedule {
    /// Rate used for the update that produces step `step + 1`.
    pub fn at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Params,
    pub v: Params,
    /// Updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Params::zeros(cfg),
            v: Params::zeros(cfg),
            t: 0,
        }
    }

    /// Applies one bias-corrected update of `grads` at rate `lr`.
    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let gs = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in
            params.tensors_mut().into_iter().zip(gs).zip(ms).zip(vs)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Global L2 norm over all gradient tensors.
pub fn grad_norm(g: &Params) -> f64 {
    g.tensors()
        .iter()
        .flat_map(|(_, t)| t.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `g` so its global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(g: &mut Params, max_norm: f64) -> f64 {
    let n = grad_norm(g);
    if n > max_norm {
        let s = max_norm / n;
        for (_, t) in g.tensors_mut() {
            t.mapv_inplace(|x| x * s);
        }
    }
    n
}
