use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use tokscribe_core::audio::AudioBuffer;
use tokscribe_core::codec::{shuffle_tokens, Codec, SegmentWindow, TokenSeq, TrackDecoder};
use tokscribe_core::dataset::{generate_track, write_dataset, MIDI_PPQ};
use tokscribe_core::metrics::{evaluate_corpus, MetricReport};
use tokscribe_core::model::{
    evaluate_teacher_forced, gradient_check, load_checkpoint, save_checkpoint, transcribe_track,
    Checkpoint, ModelConfig, Params, Trainer,
};
use tokscribe_core::notes::NoteSequence;
use tokscribe_core::segment::{
    make_training_pairs, read_manifest, SegmentConfig, Split, TrainingPair,
};
use tokscribe_core::{parse_smf, write_smf};

use crate::config::RunConfig;
use crate::Failure;

type CmdResult = Result<(), Failure>;

fn read_midi(path: &Path) -> anyhow::Result<NoteSequence> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = parse_smf(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    let w = parsed.warnings;
    if w.dangling_notes + w.zero_length_notes > 0 {
        eprintln!(
            "warning: {}: {} dangling and {} zero-length notes",
            path.display(),
            w.dangling_notes,
            w.zero_length_notes
        );
    }
    Ok(parsed.sequence)
}

fn write_midi(path: &Path, seq: &NoteSequence) -> anyhow::Result<()> {
    fs::write(path, write_smf(seq, MIDI_PPQ)).with_context(|| format!("writing {}", path.display()))
}

fn read_audio(path: &Path) -> anyhow::Result<AudioBuffer> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    AudioBuffer::read_wav(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn write_output(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

pub fn make_dataset(cfg: &RunConfig, out: &Path) -> CmdResult {
    let spec = cfg.synthetic();
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let tracks: Vec<_> = (0..spec.n_tracks)
        .into_par_iter()
        .map(|i| generate_track(&spec, i))
        .collect();
    let records = write_dataset(out, &tracks)
        .with_context(|| format!("writing dataset to {}", out.display()))?;
    fs::write(out.join("config.txt"), cfg.render()).context("writing config.txt")?;
    let count = |s: Split| records.iter().filter(|r| r.split == s).count();
    eprintln!(
        "wrote {} tracks (train {}, val {}, test {}) to {}",
        records.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        out.display()
    );
    Ok(())
}

fn window_list(seg: &SegmentConfig, duration_s: f64) -> Vec<SegmentWindow> {
    let ws = seg.window_seconds();
    let n = ((duration_s / ws) - 1e-9).ceil().max(1.0) as usize;
    (0..n)
        .map(|k| SegmentWindow::new(k as f64 * ws, (k + 1) as f64 * ws))
        .collect()
}

pub fn tokenize(cfg: &RunConfig, midi: &Path, out: Option<&Path>) -> CmdResult {
    let seg = cfg.segment();
    let seq = read_midi(midi)?;
    let codec = Codec::new(seg.window_seconds(), seg.max_tokens);
    let mut text = String::new();
    for w in window_list(&seg, seq.duration_s()) {
        text.push_str(&codec.encode(&seq, w).to_text());
        text.push('\n');
    }
    write_output(out, &text)?;
    Ok(())
}

fn read_token_lines(path: &Path) -> anyhow::Result<Vec<TokenSeq>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            TokenSeq::parse_text(line)
                .map_err(|e| anyhow!("{}: line {}: {e}", path.display(), i + 1))
        })
        .collect()
}

pub fn detokenize(cfg: &RunConfig, tokens: &Path, out: &Path) -> CmdResult {
    let seg = cfg.segment();
    let lines = read_token_lines(tokens)?;
    let ws = seg.window_seconds();
    let mut td = TrackDecoder::new();
    for (k, toks) in lines.iter().enumerate() {
        td.push(toks, SegmentWindow::new(k as f64 * ws, (k + 1) as f64 * ws));
    }
    let (seq, v) = td.finish(lines.len() as f64 * ws);
    if v.total() > 0 {
        eprintln!("warning: {} grammar violations repaired: {v:?}", v.total());
    }
    write_midi(out, &seq)?;
    Ok(())
}

pub fn augment(cfg: &RunConfig, tokens: &Path, out: Option<&Path>, copies: usize) -> CmdResult {
    let lines = read_token_lines(tokens)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut text = String::new();
    for toks in &lines {
        for _ in 0..copies {
            let sh =
                shuffle_tokens(toks, &mut rng).map_err(|e| anyhow!("{}: {e}", tokens.display()))?;
            text.push_str(&sh.to_text());
            text.push('\n');
        }
    }
    write_output(out, &text)?;
    Ok(())
}

struct LoadedTrack {
    name: String,
    split: Split,
    notes: NoteSequence,
    audio: AudioBuffer,
    pairs: Vec<TrainingPair>,
}

fn load_manifest_tracks(
    manifest: &Path,
    seg: &SegmentConfig,
    seed: u64,
) -> anyhow::Result<Vec<LoadedTrack>> {
    let f =
        File::open(manifest).with_context(|| format!("opening manifest {}", manifest.display()))?;
    let records = read_manifest(BufReader::new(f))
        .with_context(|| format!("reading {}", manifest.display()))?;
    if records.is_empty() {
        bail!("manifest {} lists no tracks", manifest.display());
    }
    let base = manifest.parent().unwrap_or(Path::new("."));
    records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let notes = read_midi(&base.join(&r.midi_path))?;
            let audio = read_audio(&base.join(&r.audio_path))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let pairs = make_training_pairs(&audio, &notes, seg, &mut rng)
                .map_err(|e| anyhow!("{}: {e}", r.audio_path))?;
            let name = Path::new(&r.midi_path).file_stem().map_or_else(
                || format!("track_{i}"),
                |s| s.to_string_lossy().into_owned(),
            );
            Ok(LoadedTrack {
                name,
                split: r.split,
                notes,
                audio,
                pairs,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct StepLog {
    step: u64,
    loss: f64,
    lr: f64,
    seconds: f64,
    grad_norm: f64,
    accuracy: f64,
}

#[derive(Serialize)]
struct EvalLog {
    step: u64,
    val_loss: f64,
    val_accuracy: f64,
    seconds: f64,
}

#[derive(Debug, Serialize)]
struct CheckpointScore {
    path: PathBuf,
    step: u64,
    val_loss: f64,
    val_token_accuracy: f64,
    val_onset_f1_flat: f64,
    val_onset_f1_midi_class: f64,
    val_onset_f1_full: f64,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    selection_split: &'static str,
    best: CheckpointScore,
    last: CheckpointScore,
    /// Checkpoint with the higher token accuracy and the one with the higher flat onset F1.
    token_accuracy_from: &'static str,
    onset_f1_from: &'static str,
}

fn checkpoint_meta(cfg: &RunConfig) -> serde_json::Value {
    serde_json::json!({ "segment": cfg.segment(), "run_config": cfg.render() })
}

fn segment_from(ckpt: &Checkpoint) -> SegmentConfig {
    ckpt.meta
        .get("segment")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or(SegmentConfig {
            frames_per_window: ckpt.config.frames_per_window,
            max_tokens: ckpt.config.max_tokens,
            ..SegmentConfig::default()
        })
}

fn score(
    p: &Params,
    model: &ModelConfig,
    seg: &SegmentConfig,
    sel: &[&LoadedTrack],
    tol: f64,
) -> Result<(f64, f64, MetricReport), Failure> {
    let pairs: Vec<&TrainingPair> = sel.iter().flat_map(|t| &t.pairs).collect();
    let stats =
        evaluate_teacher_forced(p, model, &pairs).map_err(|e| Failure::Numeric(e.to_string()))?;
    let est: Vec<NoteSequence> = sel
        .par_iter()
        .map(|t| transcribe_track(p, model, seg, &t.audio).map(|x| x.notes))
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Numeric(e.to_string()))?;
    let named: Vec<_> = sel
        .iter()
        .zip(&est)
        .map(|(t, e)| (t.name.as_str(), &t.notes, e))
        .collect();
    Ok((
        stats.mean_loss(),
        stats.accuracy(),
        evaluate_corpus(&named, tol),
    ))
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> CmdResult {
    let manifest = cfg.manifest.as_deref().ok_or_else(|| {
        Failure::Usage("train needs a manifest (--manifest or the `manifest` key)".into())
    })?;
    let seg = cfg.segment();
    let mut model = cfg.model();
    let tracks = load_manifest_tracks(manifest, &seg, cfg.seed)?;
    let train: Vec<Vec<TrainingPair>> = tracks
        .iter()
        .filter(|t| t.split == Split::Train)
        .map(|t| t.pairs.clone())
        .collect();
    if train.iter().all(Vec::is_empty) {
        return Err(Failure::Data(anyhow!("manifest has no training windows")));
    }
    let mut val: Vec<&LoadedTrack> = tracks.iter().filter(|t| t.split == Split::Val).collect();
    let mut selection_split = "val";
    if val.is_empty() {
        eprintln!("warning: no val tracks; selecting checkpoints on the train split");
        val = tracks.iter().filter(|t| t.split == Split::Train).collect();
        selection_split = "train";
    }
    let mut trainer = match resume {
        Some(path) => {
            let c = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            let adam = c.adam.ok_or_else(|| {
                Failure::Usage(format!("{} holds no optimizer state", path.display()))
            })?;
            if c.config != model {
                eprintln!(
                    "warning: using the model configuration stored in {}",
                    path.display()
                );
                model = c.config.clone();
            }
            eprintln!("resuming from step {}", c.step);
            Trainer::resume(model.clone(), cfg.train(), c.params, adam, c.step)
        }
        None => {
            Trainer::new(model.clone(), cfg.train()).map_err(|e| Failure::Usage(e.to_string()))?
        }
    };
    let dir = &cfg.run_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.txt"), cfg.render()).context("writing config.txt")?;
    let open_log = |name: &str| -> anyhow::Result<BufWriter<File>> {
        let f = fs::OpenOptions::new()
            .create(true)
            .append(resume.is_some())
            .write(true)
            .truncate(resume.is_none())
            .open(dir.join(name))
            .with_context(|| format!("opening {name}"))?;
        Ok(BufWriter::new(f))
    };
    let mut step_log = open_log("train_log.jsonl")?;
    let mut eval_log = open_log("eval_log.jsonl")?;
    let (best_path, last_path) = (dir.join("best.ckpt"), dir.join("last.ckpt"));
    let save = |t: &Trainer, path: &Path| -> anyhow::Result<()> {
        let c = Checkpoint {
            config: t.cfg.clone(),
            step: t.step,
            params: t.params.clone(),
            adam: Some(t.adam.clone()),
            meta: checkpoint_meta(cfg),
        };
        save_checkpoint(path, &c).with_context(|| format!("saving {}", path.display()))
    };
    let val_pairs: Vec<&TrainingPair> = val.iter().flat_map(|t| &t.pairs).collect();
    let mut best = f64::INFINITY;
    // A resumed run keeps its earlier best unless it is beaten.
    if resume.is_some() && best_path.exists() {
        let c = load_checkpoint(&best_path)
            .with_context(|| format!("loading {}", best_path.display()))?;
        if c.config == trainer.cfg {
            best = evaluate_teacher_forced(&c.params, &c.config, &val_pairs)
                .map_err(|e| Failure::Numeric(e.to_string()))?
                .mean_loss();
        }
    }
    let t0 = Instant::now();
    while trainer.step < cfg.train_steps {
        let s = trainer.train_step(&train).map_err(|e| {
            Failure::Numeric(format!("{e}; lr {:.3e}", cfg.train().schedule.at(e.step)))
        })?;
        let line = StepLog {
            step: s.step,
            loss: s.loss,
            lr: s.lr,
            seconds: t0.elapsed().as_secs_f64(),
            grad_norm: s.grad_norm,
            accuracy: s.accuracy,
        };
        serde_json::to_writer(&mut step_log, &line).context("writing train log")?;
        writeln!(step_log).context("writing train log")?;
        if s.step % cfg.eval_every == 0 || s.step == cfg.train_steps {
            let ev = evaluate_teacher_forced(&trainer.params, &trainer.cfg, &val_pairs)
                .map_err(|e| Failure::Numeric(e.to_string()))?;
            let val_loss = ev.mean_loss();
            if !val_loss.is_finite() {
                return Err(Failure::Numeric(format!(
                    "non-finite validation loss at step {}",
                    s.step
                )));
            }
            serde_json::to_writer(
                &mut eval_log,
                &EvalLog {
                    step: s.step,
                    val_loss,
                    val_accuracy: ev.accuracy(),
                    seconds: t0.elapsed().as_secs_f64(),
                },
            )
            .context("writing eval log")?;
            writeln!(eval_log).context("writing eval log")?;
            eprintln!(
                "step {:>6}  loss {:.4}  lr {:.2e}  {} loss {:.4}  accuracy {:.4}  {:.0}s",
                s.step,
                s.loss,
                s.lr,
                selection_split,
                val_loss,
                ev.accuracy(),
                t0.elapsed().as_secs_f64()
            );
            if val_loss < best {
                best = val_loss;
                save(&trainer, &best_path)?;
            }
            save(&trainer, &last_path)?;
            step_log.flush().context("writing train log")?;
            eval_log.flush().context("writing eval log")?;
        }
    }
    step_log.flush().context("writing train log")?;
    if !last_path.exists() {
        save(&trainer, &last_path)?;
    }
    if !best_path.exists() {
        save(&trainer, &best_path)?;
    }
    let mut scores = Vec::new();
    for path in [&best_path, &last_path] {
        let c = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        let (loss, acc, rep) = score(&c.params, &c.config, &seg, &val, cfg.tolerance_s)?;
        scores.push(CheckpointScore {
            path: path.clone(),
            step: c.step,
            val_loss: loss,
            val_token_accuracy: acc,
            val_onset_f1_flat: rep.onset.flat.f1,
            val_onset_f1_midi_class: rep.onset.midi_class.f1,
            val_onset_f1_full: rep.onset.full.f1,
        });
    }
    let last = scores.pop().expect("two scores");
    let best = scores.pop().expect("two scores");
    let pick = |b: f64, l: f64| if l > b { "last" } else { "best" };
    let summary = TrainSummary {
        selection_split,
        token_accuracy_from: pick(best.val_token_accuracy, last.val_token_accuracy),
        onset_f1_from: pick(best.val_onset_f1_flat, last.val_onset_f1_flat),
        best,
        last,
    };
    let text = serde_json::to_string_pretty(&summary).context("serializing summary")?;
    fs::write(dir.join("summary.json"), &text).context("writing summary.json")?;
    eprintln!(
        "best checkpoint: step {} ({} loss {:.4}, token accuracy {:.4}, flat onset F1 {:.3})",
        summary.best.step,
        selection_split,
        summary.best.val_loss,
        summary.best.val_token_accuracy,
        summary.best.val_onset_f1_flat
    );
    eprintln!(
        "last checkpoint: step {} ({} loss {:.4}, token accuracy {:.4}, flat onset F1 {:.3})",
        summary.last.step,
        selection_split,
        summary.last.val_loss,
        summary.last.val_token_accuracy,
        summary.last.val_onset_f1_flat
    );
    eprintln!(
        "token accuracy reported from the {} checkpoint; onset F1 reported from the {} checkpoint",
        summary.token_accuracy_from, summary.onset_f1_from
    );
    Ok(())
}

pub fn transcribe(checkpoint: &Path, audio: &[PathBuf], out: &Path) -> CmdResult {
    let c =
        load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let seg = segment_from(&c);
    let single_file =
        audio.len() == 1 && out.extension().is_some_and(|e| e == "mid" || e == "midi");
    if !single_file {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    }
    audio
        .par_iter()
        .try_for_each(|path| -> Result<(), Failure> {
            let buf = read_audio(path)?;
            let t = transcribe_track(&c.params, &c.config, &seg, &buf)
                .map_err(|e| Failure::Numeric(e.to_string()))?;
            if t.violations.total() > 0 {
                eprintln!(
                    "{}: {} grammar violations repaired",
                    path.display(),
                    t.violations.total()
                );
            }
            let target = if single_file {
                out.to_path_buf()
            } else {
                let stem = path
                    .file_stem()
                    .ok_or_else(|| anyhow!("{} has no file name", path.display()))?;
                out.join(stem).with_extension("mid")
            };
            write_midi(&target, &t.notes)?;
            Ok(())
        })
}

fn midi_by_stem(dir: &Path) -> anyhow::Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let is_midi = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"));
        if let (true, Some(stem)) = (is_midi, path.file_stem()) {
            out.insert(stem.to_string_lossy().into_owned(), path);
        }
    }
    Ok(out)
}

pub fn evaluate(
    reference: &Path,
    estimate: &Path,
    tol: f64,
    json: Option<&Path>,
    csv_out: Option<&Path>,
) -> CmdResult {
    let refs = midi_by_stem(reference)?;
    let ests = midi_by_stem(estimate)?;
    for stem in refs.keys().filter(|s| !ests.contains_key(*s)) {
        eprintln!("warning: reference {stem} has no estimate; excluded");
    }
    for stem in ests.keys().filter(|s| !refs.contains_key(*s)) {
        eprintln!("warning: estimate {stem} has no reference; excluded");
    }
    let stems: Vec<&String> = refs.keys().filter(|s| ests.contains_key(*s)).collect();
    if stems.is_empty() {
        return Err(Failure::Data(anyhow!(
            "no reference and estimate files share a stem"
        )));
    }
    let loaded: Vec<(NoteSequence, NoteSequence)> = stems
        .par_iter()
        .map(|s| Ok((read_midi(&refs[*s])?, read_midi(&ests[*s])?)))
        .collect::<anyhow::Result<_>>()?;
    let named: Vec<_> = stems
        .iter()
        .zip(&loaded)
        .map(|(s, (r, e))| (s.as_str(), r, e))
        .collect();
    let report = evaluate_corpus(&named, tol);
    let text = serde_json::to_string_pretty(&report).context("serializing report")?;
    write_output(json, &(text + "\n"))?;
    if let Some(path) = csv_out {
        write_csv(path, &report).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CsvRow<'a> {
    track: &'a str,
    flat_precision: f64,
    flat_recall: f64,
    flat_f1: f64,
    midi_class_precision: f64,
    midi_class_recall: f64,
    midi_class_f1: f64,
    full_precision: f64,
    full_recall: f64,
    full_f1: f64,
    instruments_gt: usize,
    instruments_tr: usize,
    instrument_precision: f64,
    instrument_recall: f64,
    instrument_f1: f64,
}

fn write_csv(path: &Path, report: &MetricReport) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for t in &report.tracks {
        let o = &t.onset;
        w.serialize(CsvRow {
            track: &t.track,
            flat_precision: o.flat.precision,
            flat_recall: o.flat.recall,
            flat_f1: o.flat.f1,
            midi_class_precision: o.midi_class.precision,
            midi_class_recall: o.midi_class.recall,
            midi_class_f1: o.midi_class.f1,
            full_precision: o.full.precision,
            full_recall: o.full.recall,
            full_f1: o.full.f1,
            instruments_gt: t.instruments_gt,
            instruments_tr: t.instruments_tr,
            instrument_precision: t.instrument.precision,
            instrument_recall: t.instrument.recall,
            instrument_f1: t.instrument.f1,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn gradcheck(seed: u64, seeds: u64) -> CmdResult {
    let mut worst: f64 = 0.0;
    for s in seed..seed + seeds {
        let r = gradient_check(s, true);
        let top = r
            .tensors
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
            .expect("model has tensors");
        println!(
            "seed {s}: loss {:.6}, {} tensors, max relative error {:.3e} ({}), elementwise max {:.3e}",
            r.loss,
            r.tensors.len(),
            r.max_rel_err(),
            top.name,
            r.max_elem_rel_err()
        );
        worst = worst.max(r.max_rel_err());
    }
    println!("max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e})");
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "gradient check error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
        )))
    }
}
