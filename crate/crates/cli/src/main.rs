//! `tokscribe`: dataset synthesis, tokenization, training, transcription and
//! evaluation from one binary.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ConfigError, RunConfig, ENV_PREFIX};

#[derive(Debug, Parser)]
#[command(
    name = "tokscribe",
    version,
    about = "Token-based multi-instrument music transcription",
    after_help = "Configuration is flat `key = value` text. Every key can also be set through an \
                  environment variable named TOKSCRIBE_<KEY> (for example TOKSCRIBE_L_AGG=32). \
                  Precedence, lowest first: defaults, --config file, environment, --set, --seed. \
                  Run `tokscribe config` to list every key with its resolved value.\n\n\
                  Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure."
)]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Random seed; overrides the `seed` key.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for per-track work (0 = one per core).
    #[arg(long, global = true, value_name = "N", default_value_t = 0)]
    threads: usize,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a seeded corpus: MIDI, WAV and a JSONL manifest split 90:5:5.
    MakeDataset {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode a MIDI file as token text, one line per window.
    Tokenize {
        midi: PathBuf,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode token text (one line per window) into a MIDI file.
    Detokenize {
        tokens: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shuffle program-note groups within each time step of token text.
    Augment {
        tokens: PathBuf,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Shuffled copies of each line.
        #[arg(long, default_value_t = 1)]
        copies: usize,
    },
    /// Train on the train split of a manifest, selecting on the val split.
    Train {
        /// Manifest path; overrides the `manifest` key.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Run directory for logs and checkpoints; overrides the `run_dir` key.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint that holds optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Transcribe WAV files to MIDI with a trained checkpoint.
    Transcribe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A `.mid` file for a single input, otherwise a directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        audio: Vec<PathBuf>,
    },
    /// Score estimated MIDI files against references, pairing files by stem.
    Evaluate {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long = "est")]
        estimate: PathBuf,
        /// Onset tolerance in seconds; overrides the `tolerance_s` key.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Write the JSON report here instead of standard output.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Also write per-track scores as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference gradient check of the model on five seeds.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Print the resolved configuration.
    Config,
}

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&path.display().to_string(), &text)?;
    }
    cfg.apply_env(std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)))?;
    cfg.apply_overrides(&cli.set)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = resolve(&cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Failure::Usage(format!("--threads: {e}")))?;
    if !matches!(cli.command, Command::Config) {
        for line in cfg.render().lines() {
            eprintln!("# {line}");
        }
    }
    match cli.command {
        Command::MakeDataset { out } => commands::make_dataset(&cfg, &out),
        Command::Tokenize { midi, out } => commands::tokenize(&cfg, &midi, out.as_deref()),
        Command::Detokenize { tokens, out } => commands::detokenize(&cfg, &tokens, &out),
        Command::Augment {
            tokens,
            out,
            copies,
        } => commands::augment(&cfg, &tokens, out.as_deref(), copies),
        Command::Train {
            manifest,
            out,
            resume,
        } => {
            if manifest.is_some() {
                cfg.manifest = manifest;
            }
            if let Some(o) = out {
                cfg.run_dir = o;
            }
            commands::train(&cfg, resume.as_deref())
        }
        Command::Transcribe {
            checkpoint,
            out,
            audio,
        } => commands::transcribe(&checkpoint, &audio, &out),
        Command::Evaluate {
            reference,
            estimate,
            tolerance,
            json,
            csv,
        } => {
            let tol = tolerance.unwrap_or(cfg.tolerance_s);
            if tol.is_nan() || tol < 0.0 {
                return Err(Failure::Usage("--tolerance must be non-negative".into()));
            }
            commands::evaluate(&reference, &estimate, tol, json.as_deref(), csv.as_deref())
        }
        Command::Gradcheck { seeds } => commands::gradcheck(cfg.seed, seeds),
        Command::Config => {
            print!("{}", cfg.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Data(e) => eprintln!("error: {e:#}"),
                Failure::Numeric(m) => eprintln!("numeric failure: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
