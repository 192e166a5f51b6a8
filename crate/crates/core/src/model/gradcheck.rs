use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{example_loss, Example};
use super::params::Params;
use super::ModelConfig;
use crate::codec::Vocab;

pub const FD_STEP: f64 = 1e-5;

/// Finite-difference agreement for one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorError {
    pub name: String,
    pub len: usize,
    /// `|g_fd - g| / max(|g_fd|, |g|, 1e-8)` with L2 norms over the tensor.
    pub rel_err: f64,
    /// Largest elementwise value of the same ratio.
    pub max_elem_rel_err: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub loss: f64,
    pub tensors: Vec<TensorError>,
}

impl GradCheckReport {
    /// Largest per-tensor relative error.
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn max_elem_rel_err(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_elem_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Small configuration used for finite-difference checks.
pub fn tiny_config(memory: bool) -> ModelConfig {
    ModelConfig {
        d_model: 12,
        encoder_layers: 1,
        decoder_layers: 1,
        attn_heads: 3,
        ff_dim: 24,
        memory_heads: 6,
        l_agg: if memory { 4 } else { 0 },
        max_tokens: 16,
        frames_per_window: 4,
        input_dim: 6,
        vocab_size: 40,
        dropout: 0.0,
        share_memory_embedding: false,
    }
}

struct Batch {
    frames: Vec<Array2<f32>>,
    valid: Vec<usize>,
    priors: Vec<Vec<u32>>,
    targets: Vec<Vec<u32>>,
}

fn random_batch(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Batch {
    let n = cfg.max_tokens;
    let v = cfg.vocab_size as u32;
    let mut ids = |len: usize| -> Vec<u32> {
        let mut t: Vec<u32> = (0..len).map(|_| rng.random_range(4..v)).collect();
        t.resize(n, Vocab::PAD);
        t
    };
    let priors = vec![ids(11), ids(3)];
    let targets = vec![ids(9), ids(14)];
    let frames = (0..2)
        .map(|_| {
            Array2::from_shape_simple_fn((cfg.frames_per_window, cfg.input_dim), || {
                rng.random_range(-13.0f32..1.0)
            })
        })
        .collect();
    Batch {
        frames,
        valid: vec![cfg.frames_per_window, cfg.frames_per_window - 1],
        priors,
        targets,
    }
}

fn batch_loss(p: &Params, cfg: &ModelConfig, b: &Batch, grads: Option<&mut Params>) -> f64 {
    let total: usize = b
        .targets
        .iter()
        .map(|t| t.iter().filter(|&&x| x != Vocab::PAD).count())
        .sum();
    let scale = 1.0 / total as f64;
    let mut sum = 0.0;
    let mut grads = grads;
    for i in 0..b.targets.len() {
        let ex = Example {
            frames: b.frames[i].view(),
            valid_frames: b.valid[i],
            prior: &b.priors[i],
            target: &b.targets[i],
        };
        sum += example_loss::<ChaCha8Rng>(p, cfg, &ex, scale, grads.as_deref_mut(), None)
            .expect("tiny batch is well formed")
            .loss_sum;
    }
    sum * scale
}

/// Central differences against the analytic gradient for every parameter of a
/// randomly initialised tiny model on a random two-example batch.
pub fn gradient_check(seed: u64, memory: bool) -> GradCheckReport {
    let cfg = tiny_config(memory);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::init(&cfg, seed);
    // perturb norms and biases away from their trivial initial values
    for (name, t) in params.tensors_mut() {
        if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".b") {
            t.mapv_inplace(|x| x + rng.random_range(-0.3..0.3));
        }
        if name == "out.w" {
            t.mapv_inplace(|x| x * 30.0);
        }
    }
    let batch = random_batch(&cfg, &mut rng);
    let mut grads = Params::zeros(&cfg);
    let loss = batch_loss(&params, &cfg, &batch, Some(&mut grads));
    let analytic: Vec<(String, Array2<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();

    let mut tensors = Vec::new();
    for (ti, (name, g)) in analytic.iter().enumerate() {
        let mut fd = Array2::zeros(g.raw_dim());
        for k in 0..g.len() {
            let orig = params.tensors()[ti].1.as_slice().unwrap()[k];
            let mut at = |v: f64| {
                params.tensors_mut()[ti].1.as_slice_mut().unwrap()[k] = v;
                batch_loss(&params, &cfg, &batch, None)
            };
            let up = at(orig + FD_STEP);
            let down = at(orig - FD_STEP);
            at(orig);
            fd.as_slice_mut().unwrap()[k] = (up - down) / (2.0 * FD_STEP);
        }
        let diff = (&fd - g).mapv(|x| x * x).sum().sqrt();
        let (nf, ng) = (
            fd.mapv(|x| x * x).sum().sqrt(),
            g.mapv(|x| x * x).sum().sqrt(),
        );
        let max_elem = fd
            .iter()
            .zip(g.iter())
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-8))
            .fold(0.0, f64::max);
        tensors.push(TensorError {
            name: name.clone(),
            len: g.len(),
            rel_err: diff / nf.max(ng).max(1e-8),
            max_elem_rel_err: max_elem,
            grad_norm: ng,
        });
    }
    GradCheckReport {
        seed,
        loss,
        tensors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_flag_controls_reported_tensors() {
        let with = gradient_check(3, true);
        let without = gradient_check(3, false);
        assert!(with.tensors.iter().any(|t| t.name.starts_with("mem.")));
        assert!(!without.tensors.iter().any(|t| t.name.starts_with("mem.")));
        assert!(with.max_rel_err() < 1e-4, "{:?}", with.tensors);
        assert!(without.max_rel_err() < 1e-4);
        assert!(with
            .tensors
            .iter()
            .filter(|t| t.name.starts_with("mem."))
            .all(|t| t.grad_norm > 0.0));
    }

    #[test]
    fn step_against_gradient_lowers_loss() {
        let cfg = tiny_config(true);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = Params::init(&cfg, 11);
        let batch = random_batch(&cfg, &mut rng);
        let mut g = Params::zeros(&cfg);
        let l0 = batch_loss(&p, &cfg, &batch, Some(&mut g));
        let gs: Vec<Array2<f64>> = g.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        for ((_, t), gt) in p.tensors_mut().into_iter().zip(&gs) {
            t.scaled_add(-1e-3, gt);
        }
        assert!(batch_loss(&p, &cfg, &batch, None) < l0);
    }
}
