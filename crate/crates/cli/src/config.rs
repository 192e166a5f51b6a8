//! Flat `key = value` run configuration.
//!
//! Sources, later ones winning: built-in defaults, the `--config` file,
//! `TOKSCRIBE_<KEY>` environment variables, `--set key=value` flags, then the
//! dedicated `--seed` flag. Unknown keys are rejected from every source.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;
use tokscribe_core::dataset::{CorpusMode, SyntheticSpec};
use tokscribe_core::model::{LrSchedule, ModelConfig, TrainConfig};
use tokscribe_core::segment::SegmentConfig;
use tokscribe_core::spectral::N_MELS;

pub const ENV_PREFIX: &str = "TOKSCRIBE_";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{source_name}: unknown config key `{key}`")]
    UnknownKey { source_name: String, key: String },
    #[error("{source_name}: line {line}: expected `key = value`")]
    Syntax { source_name: String, line: usize },
    #[error("{source_name}: `{key}`: cannot parse `{value}` as {expected}")]
    Value {
        source_name: String,
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Fully resolved settings for every subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // segmenting
    pub frames_per_window: usize,
    pub max_tokens: usize,
    pub max_hop: usize,
    // model
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attn_heads: usize,
    pub ff_dim: usize,
    pub memory_heads: usize,
    pub l_agg: usize,
    pub dropout: f64,
    pub share_memory_embedding: bool,
    // optimisation
    pub batch_size: usize,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub clip_norm: f64,
    pub train_steps: u64,
    pub eval_every: u64,
    pub shuffle_targets: bool,
    // evaluation
    pub tolerance_s: f64,
    // synthetic data
    pub n_tracks: usize,
    pub track_seconds: f64,
    pub min_instruments: usize,
    pub max_instruments: usize,
    pub drums: bool,
    pub notes_per_track: usize,
    pub polyphony: usize,
    pub corpus_mode: CorpusMode,
    pub riff_pool: usize,
    pub riff_seed: u64,
    // paths
    pub manifest: Option<PathBuf>,
    pub run_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seg = SegmentConfig::default();
        let m = ModelConfig::default();
        let d = SyntheticSpec::default();
        Self {
            seed: 0,
            frames_per_window: seg.frames_per_window,
            max_tokens: seg.max_tokens,
            max_hop: seg.max_hop,
            d_model: m.d_model,
            encoder_layers: m.encoder_layers,
            decoder_layers: m.decoder_layers,
            attn_heads: m.attn_heads,
            ff_dim: m.ff_dim,
            memory_heads: m.memory_heads,
            l_agg: m.l_agg,
            // the toy corpora are memorised, so regularisation only slows training
            dropout: 0.0,
            share_memory_embedding: m.share_memory_embedding,
            batch_size: 8,
            lr_peak: 1e-3,
            lr_floor: 1e-4,
            warmup_steps: 30,
            total_steps: 2000,
            clip_norm: 1.0,
            train_steps: 500,
            eval_every: 50,
            shuffle_targets: false,
            tolerance_s: tokscribe_core::metrics::DEFAULT_ONSET_TOLERANCE_S,
            n_tracks: d.n_tracks,
            track_seconds: d.track_seconds,
            min_instruments: d.min_instruments,
            max_instruments: d.max_instruments,
            drums: d.drums,
            notes_per_track: d.notes_per_track,
            polyphony: d.polyphony,
            corpus_mode: d.mode,
            riff_pool: d.riff_pool,
            riff_seed: d.riff_seed,
            manifest: None,
            run_dir: PathBuf::from("run"),
        }
    }
}

fn parse<T: std::str::FromStr>(
    src: &str,
    key: &str,
    v: &str,
    expected: &'static str,
) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::Value {
        source_name: src.to_string(),
        key: key.to_string(),
        value: v.to_string(),
        expected,
    })
}

fn parse_bool(src: &str, key: &str, v: &str) -> Result<bool, ConfigError> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::Value {
            source_name: src.to_string(),
            key: key.to_string(),
            value: v.to_string(),
            expected: "a boolean",
        }),
    }
}

macro_rules! keys {
    ($($key:ident : $kind:ident),* $(,)?) => {
        #[cfg(test)]
        pub const KEYS: &[&str] = &[$(stringify!($key)),*];

        impl RunConfig {
            /// Applies one setting; `src` names the source for error messages.
            pub fn set(&mut self, src: &str, key: &str, value: &str) -> Result<(), ConfigError> {
                let v = value.trim();
                match key {
                    $(stringify!($key) => keys!(@set self, src, $key, $kind, v),)*
                    _ => return Err(ConfigError::UnknownKey { source_name: src.to_string(), key: key.to_string() }),
                }
                Ok(())
            }

            /// Every key with its current value, one `key = value` line each.
            pub fn render(&self) -> String {
                let mut out = String::new();
                $(let _ = writeln!(out, "{} = {}", stringify!($key), keys!(@show self, $key, $kind));)*
                out
            }
        }
    };
    (@set $s:ident, $src:ident, $key:ident, usize, $v:ident) => { $s.$key = parse($src, stringify!($key), $v, "a non-negative integer")? };
    (@set $s:ident, $src:ident, $key:ident, u64, $v:ident) => { $s.$key = parse($src, stringify!($key), $v, "a non-negative integer")? };
    (@set $s:ident, $src:ident, $key:ident, f64, $v:ident) => { $s.$key = parse($src, stringify!($key), $v, "a number")? };
    (@set $s:ident, $src:ident, $key:ident, bool, $v:ident) => { $s.$key = parse_bool($src, stringify!($key), $v)? };
    (@set $s:ident, $src:ident, $key:ident, path, $v:ident) => { $s.$key = PathBuf::from($v) };
    (@set $s:ident, $src:ident, $key:ident, opt_path, $v:ident) => { $s.$key = (!$v.is_empty()).then(|| PathBuf::from($v)) };
    (@set $s:ident, $src:ident, $key:ident, mode, $v:ident) => {
        $s.$key = match $v {
            "standard" => CorpusMode::Standard,
            "disambiguation" => CorpusMode::Disambiguation,
            _ => return Err(ConfigError::Value {
                source_name: $src.to_string(),
                key: stringify!($key).to_string(),
                value: $v.to_string(),
                expected: "`standard` or `disambiguation`",
            }),
        }
    };
    (@show $s:ident, $key:ident, path) => { $s.$key.display() };
    (@show $s:ident, $key:ident, opt_path) => { $s.$key.as_deref().map(Path::display).map(|d| d.to_string()).unwrap_or_default() };
    (@show $s:ident, $key:ident, mode) => { match $s.$key { CorpusMode::Standard => "standard", CorpusMode::Disambiguation => "disambiguation" } };
    (@show $s:ident, $key:ident, $kind:ident) => { $s.$key };
}

keys! {
    seed: u64,
    frames_per_window: usize,
    max_tokens: usize,
    max_hop: usize,
    d_model: usize,
    encoder_layers: usize,
    decoder_layers: usize,
    attn_heads: usize,
    ff_dim: usize,
    memory_heads: usize,
    l_agg: usize,
    dropout: f64,
    share_memory_embedding: bool,
    batch_size: usize,
    lr_peak: f64,
    lr_floor: f64,
    warmup_steps: u64,
    total_steps: u64,
    clip_norm: f64,
    train_steps: u64,
    eval_every: u64,
    shuffle_targets: bool,
    tolerance_s: f64,
    n_tracks: usize,
    track_seconds: f64,
    min_instruments: usize,
    max_instruments: usize,
    drums: bool,
    notes_per_track: usize,
    polyphony: usize,
    corpus_mode: mode,
    riff_pool: usize,
    riff_seed: u64,
    manifest: opt_path,
    run_dir: path,
}

impl RunConfig {
    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, src: &str, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax {
                source_name: src.to_string(),
                line: n + 1,
            })?;
            self.set(src, k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies `TOKSCRIBE_<KEY>` variables from `vars`.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(
        &mut self,
        vars: I,
    ) -> Result<(), ConfigError> {
        for (name, value) in vars {
            if let Some(key) = name.strip_prefix(ENV_PREFIX) {
                self.set(
                    &format!("environment variable {name}"),
                    &key.to_ascii_lowercase(),
                    &value,
                )?;
            }
        }
        Ok(())
    }

    /// Applies `key=value` override flags.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<(), ConfigError> {
        for s in sets {
            let (k, v) = s.split_once('=').ok_or(ConfigError::Syntax {
                source_name: format!("--set {s}"),
                line: 1,
            })?;
            self.set("--set", k.trim(), v)?;
        }
        Ok(())
    }

    pub fn segment(&self) -> SegmentConfig {
        SegmentConfig {
            frames_per_window: self.frames_per_window,
            max_tokens: self.max_tokens,
            max_hop: self.max_hop.max(1),
            batch_segments: self.batch_size,
            ..SegmentConfig::default()
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            attn_heads: self.attn_heads,
            ff_dim: self.ff_dim,
            memory_heads: self.memory_heads,
            l_agg: self.l_agg,
            max_tokens: self.max_tokens,
            frames_per_window: self.frames_per_window,
            input_dim: N_MELS,
            vocab_size: self.segment().vocab().size(),
            dropout: self.dropout,
            share_memory_embedding: self.share_memory_embedding,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            schedule: LrSchedule {
                peak: self.lr_peak,
                floor: self.lr_floor,
                warmup_steps: self.warmup_steps,
                total_steps: self.total_steps,
            },
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            shuffle_targets: self.shuffle_targets,
            seed: self.seed,
        }
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_tracks: self.n_tracks,
            track_seconds: self.track_seconds,
            min_instruments: self.min_instruments,
            max_instruments: self.max_instruments,
            drums: self.drums,
            notes_per_track: self.notes_per_track,
            polyphony: self.polyphony,
            window_seconds: self.segment().window_seconds(),
            mode: self.corpus_mode,
            riff_pool: self.riff_pool,
            riff_seed: self.riff_seed,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(ConfigError::Invalid(
                "batch_size and eval_every must be positive".into(),
            ));
        }
        if self.tolerance_s.is_nan() || self.tolerance_s < 0.0 {
            return Err(ConfigError::Invalid(
                "tolerance_s must be non-negative".into(),
            ));
        }
        Ok(())
    }
}
