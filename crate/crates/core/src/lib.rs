//! Token-based multi-instrument music transcription with segment memory.
//!
//! The pipeline: [`midi`] and [`audio`] move notes and sound in and out,
//! [`codec`] turns notes into event tokens per window, [`spectral`] computes
//! log-mel frames, [`segment`] pairs frame windows with target and prior tokens,
//! [`model`] is the encoder-decoder transformer with a memory block built from
//! prior tokens, and [`metrics`] scores transcriptions.

pub mod audio;
pub mod codec;
pub mod dataset;
pub mod metrics;
pub mod midi;
pub mod model;
pub mod notes;
pub mod segment;
pub mod spectral;

pub use audio::{synthesize_additive, AudioBuffer};
pub use codec::{Codec, SegmentWindow, Token, TokenSeq, Vocab};
pub use midi::{parse_smf, write_smf};
pub use notes::{NoteEvent, NoteSequence};
pub use spectral::{log_mel, FrameMatrix};
