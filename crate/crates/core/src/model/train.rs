use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::network::{example_loss, Example, LossStats};
use super::optim::{clip_grad_norm, Adam, LrSchedule};
use super::params::Params;
use super::{ModelConfig, ModelError};
use crate::codec::{shuffle_tokens, Vocab};
use crate::segment::{batch_consecutive, TrainingPair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub schedule: LrSchedule,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Shuffle program-note groups of each target before the step.
    pub shuffle_targets: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 12,
            schedule: LrSchedule::default(),
            clip_norm: Some(1.0),
            shuffle_targets: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Step count after the update.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub accuracy: f64,
}

/// Non-finite loss or gradient during a step.
#[derive(Debug, Error, PartialEq)]
#[error("non-finite {what} at step {step}; batch (track, window) ids {batch:?}")]
pub struct NumericError {
    pub step: u64,
    pub what: &'static str,
    pub batch: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: ModelConfig,
    pub train: TrainConfig,
    pub params: Params,
    pub adam: Adam,
    pub step: u64,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step);
    r
}

/// Number of TIME tokens implied by a codec-sized vocabulary.
fn codec_vocab(cfg: &ModelConfig) -> Option<Vocab> {
    let fixed = Vocab::new(1).size() - 1;
    (cfg.vocab_size > fixed).then(|| Vocab::new((cfg.vocab_size - fixed) as u32))
}

impl Trainer {
    pub fn new(cfg: ModelConfig, train: TrainConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Self {
            params: Params::init(&cfg, train.seed),
            adam: Adam::new(&cfg),
            cfg,
            train,
            step: 0,
        })
    }

    /// Continues from saved weights and optimizer state.
    pub fn resume(
        cfg: ModelConfig,
        train: TrainConfig,
        params: Params,
        adam: Adam,
        step: u64,
    ) -> Self {
        Self {
            cfg,
            train,
            params,
            adam,
            step,
        }
    }

    /// One update on consecutive windows drawn from `tracks`. Batch selection,
    /// target shuffling and dropout all derive from `(seed, step)`, so a resumed
    /// run replays the same sequence of batches.
    pub fn train_step(&mut self, tracks: &[Vec<TrainingPair>]) -> Result<StepStats, NumericError> {
        let mut rng = step_rng(self.train.seed, self.step);
        let lens: Vec<usize> = tracks.iter().map(Vec::len).collect();
        let nonempty: Vec<usize> = (0..tracks.len()).filter(|&t| lens[t] > 0).collect();
        assert!(!nonempty.is_empty(), "no training windows");
        let first = nonempty[rng.random_range(0..nonempty.len())];
        let ids = batch_consecutive(&lens, first, self.train.batch_size, &mut rng);
        let shuffled: Vec<Vec<u32>> = ids
            .iter()
            .map(|&(t, w)| {
                let pair = &tracks[t][w];
                match (self.train.shuffle_targets, codec_vocab(&self.cfg)) {
                    (true, Some(vocab)) => {
                        let toks = pair.target_tokens(&vocab);
                        let sh =
                            shuffle_tokens(&toks, &mut rng).expect("targets are grammar-valid");
                        vocab
                            .padded_ids(&sh, pair.target.len())
                            .expect("same vocabulary")
                    }
                    _ => pair.target.clone(),
                }
            })
            .collect();
        let batch: Vec<Example<'_>> = ids
            .iter()
            .zip(&shuffled)
            .map(|(&(t, w), target)| {
                let p = &tracks[t][w];
                Example {
                    frames: p.frames.view(),
                    valid_frames: p.valid_frames,
                    prior: &p.prior,
                    target,
                }
            })
            .collect();
        self.step_on_batch_with(&batch, &mut rng)
            .map_err(|what| NumericError {
                step: self.step,
                what,
                batch: ids,
            })
    }

    /// One update on an explicit batch.
    pub fn step_on_batch(&mut self, batch: &[Example<'_>]) -> Result<StepStats, NumericError> {
        let mut rng = step_rng(self.train.seed, self.step);
        self.step_on_batch_with(batch, &mut rng)
            .map_err(|what| NumericError {
                step: self.step,
                what,
                batch: (0..batch.len()).map(|i| (0, i)).collect(),
            })
    }

    fn step_on_batch_with<R: Rng>(
        &mut self,
        batch: &[Example<'_>],
        rng: &mut R,
    ) -> Result<StepStats, &'static str> {
        let total: usize = batch
            .iter()
            .map(|e| e.target.iter().filter(|&&t| t != Vocab::PAD).count())
            .sum();
        let scale = 1.0 / total.max(1) as f64;
        let mut grads = Params::zeros(&self.cfg);
        let mut stats = LossStats::default();
        let dropout = self.cfg.dropout > 0.0;
        for ex in batch {
            let r = if dropout { Some(&mut *rng) } else { None };
            stats += example_loss(&self.params, &self.cfg, ex, scale, Some(&mut grads), r)
                .map_err(|e| match e {
                    ModelError::NonFinite(w) => w,
                    _ => "example",
                })?;
        }
        if !stats.loss_sum.is_finite() {
            return Err("loss");
        }
        let norm = match self.train.clip_norm {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => super::optim::grad_norm(&grads),
        };
        if !norm.is_finite() {
            return Err("gradient");
        }
        let lr = self.train.schedule.at(self.step);
        self.adam.step(&mut self.params, &grads, lr);
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss: stats.mean_loss(),
            lr,
            grad_norm: norm,
            accuracy: stats.accuracy(),
        })
    }
}

/// Teacher-forced loss and token accuracy without dropout.
pub fn evaluate_teacher_forced(
    p: &Params,
    cfg: &ModelConfig,
    pairs: &[&TrainingPair],
) -> Result<LossStats, ModelError> {
    let mut stats = LossStats::default();
    for pair in pairs {
        let ex = Example {
            frames: pair.frames.view(),
            valid_frames: pair.valid_frames,
            prior: &pair.prior,
            target: &pair.target,
        };
        stats += example_loss::<ChaCha8Rng>(p, cfg, &ex, 0.0, None, None)?;
    }
    Ok(stats)
}
