//! Encoder-decoder transformer with a memory block built from prior tokens.
//!
//! Forward and backward passes are written out layer by layer in 64-bit floats.
//! Cross-attention keys are the encoder states followed by `l_agg` memory rows.

mod checkpoint;
mod gradcheck;
mod infer;
mod layers;
mod network;
mod optim;
mod params;
mod train;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CheckpointError,
};
pub use gradcheck::{gradient_check, tiny_config, GradCheckReport, TensorError, FD_STEP};
pub use infer::{
    cross_key_len, decode_logits, embed_memory, encode_frames, greedy_decode,
    prior_from_prediction, transcribe_track, Transcription,
};
pub use layers::sinusoidal_positions;
pub use network::{example_loss, Example, LossStats};
pub use optim::{Adam, LrSchedule};
pub use params::{Params, TensorVisitor};
pub use train::{evaluate_teacher_forced, NumericError, StepStats, TrainConfig, Trainer};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attn_heads: usize,
    pub ff_dim: usize,
    pub memory_heads: usize,
    /// Memory rows appended to the cross-attention keys; 0 disables the memory path.
    pub l_agg: usize,
    /// Token sequence length `N_t`.
    pub max_tokens: usize,
    /// Frames per window `N_f`.
    pub frames_per_window: usize,
    /// Features per frame (mel bins).
    pub input_dim: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    /// Reuse the decoder token embedding for prior tokens instead of a separate table.
    pub share_memory_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 96,
            encoder_layers: 2,
            decoder_layers: 2,
            attn_heads: 6,
            ff_dim: 192,
            memory_heads: 6,
            l_agg: 64,
            max_tokens: 1024,
            frames_per_window: 256,
            input_dim: crate::spectral::N_MELS,
            vocab_size: crate::codec::Vocab::for_window(2.048).size(),
            dropout: 0.1,
            share_memory_embedding: false,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("expected {expected} {what}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("token id {0} outside the vocabulary")]
    TokenId(u32),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.attn_heads == 0 || self.d_model % self.attn_heads != 0 {
            return bad("d_model must be a positive multiple of attn_heads");
        }
        if self.l_agg > 0 && (self.memory_heads == 0 || self.d_model % self.memory_heads != 0) {
            return bad("d_model must be a positive multiple of memory_heads");
        }
        if self.l_agg > self.max_tokens {
            return bad("l_agg must not exceed max_tokens");
        }
        if self.vocab_size < 4
            || self.max_tokens == 0
            || self.frames_per_window == 0
            || self.input_dim == 0
        {
            return bad("vocab_size, max_tokens, frames_per_window and input_dim must be positive");
        }
        if self.ff_dim == 0 {
            return bad("ff_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn has_memory(&self) -> bool {
        self.l_agg > 0
    }
}
