//! The event-token language for one time window and its conversions.
//!
//! A window sequence is a tie section naming notes still sounding at the window
//! start, the `TIE` token, then one `TIME` token per occupied 10 ms bin, each
//! followed by its note-off groups and then its note-on groups, and finally `EOS`.

mod decode;
mod encode;
mod grammar;
mod token;

use thiserror::Error;

pub use decode::{decode_tokens, DecodedWindow, HeldNotes, TrackDecoder, Violations};
pub use encode::encode_segment;
pub use grammar::{
    canonicalize, parse_structured, shuffle_tokens, validate, NoteKey, Structured, TimeBlock,
};
pub use token::{time_bins_for, Token, TokenSeq, Vocab, DRUM_TOKEN_PROGRAM, TIME_STEP_S};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("grammar violation at token {position}: {reason}")]
    Grammar {
        position: usize,
        reason: &'static str,
    },
    #[error("token {0} is outside the vocabulary")]
    TokenOutOfRange(Token),
    #[error("id {0} is outside the vocabulary")]
    IdOutOfRange(u32),
    #[error("unrecognised token `{0}`")]
    BadTokenText(String),
    #[error("column {column}: unrecognised token `{text}`")]
    TokenText { column: usize, text: String },
}

/// Time span `[start_s, end_s)` covered by one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentWindow {
    pub start_s: f64,
    pub end_s: f64,
}

impl SegmentWindow {
    pub fn new(start_s: f64, end_s: f64) -> Self {
        assert!(end_s > start_s, "window must have positive length");
        Self { start_s, end_s }
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start_s && t < self.end_s
    }

    /// Nearest 10 ms bin (ties round up) relative to the window start, clamped to
    /// `[0, time_bins)`.
    pub fn bin_of(&self, t: f64, time_bins: u32) -> u16 {
        let raw = ((t - self.start_s) / TIME_STEP_S + 0.5 + 1e-9).floor();
        raw.clamp(0.0, f64::from(time_bins - 1)) as u16
    }

    pub fn time_of(&self, bin: u16) -> f64 {
        self.start_s + f64::from(bin) * TIME_STEP_S
    }
}

/// Window geometry shared by encoding and decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Codec {
    pub vocab: Vocab,
    /// Maximum sequence length including EOS.
    pub max_tokens: usize,
}

impl Codec {
    pub fn new(window_seconds: f64, max_tokens: usize) -> Self {
        Self {
            vocab: Vocab::for_window(window_seconds),
            max_tokens,
        }
    }

    pub fn encode(&self, seq: &crate::notes::NoteSequence, window: SegmentWindow) -> TokenSeq {
        encode_segment(seq, window, self.vocab.time_bins(), self.max_tokens)
    }

    pub fn decode(
        &self,
        tokens: &[Token],
        window: SegmentWindow,
        held: &HeldNotes,
    ) -> DecodedWindow {
        decode_tokens(tokens, window, held)
    }
}
