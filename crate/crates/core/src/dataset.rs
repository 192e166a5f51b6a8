//! Seeded synthetic multi-instrument corpora and train/val/test splitting.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{synthesize_additive, AudioBuffer, AudioError, MODEL_SAMPLE_RATE};
use crate::midi::write_smf;
use crate::notes::{NoteEvent, NoteSequence};
use crate::segment::{write_manifest, ManifestRecord, Split};

/// One program per timbre class, so tracks mixing them stay separable by ear.
pub const PROGRAM_PALETTE: [u8; 8] = [0, 24, 32, 40, 56, 64, 73, 80];

/// Piano-timbre programs that only context can tell apart.
pub const AMBIGUOUS_PROGRAMS: [u8; 2] = [0, 1];
/// Cue instruments heard in the first window, one per ambiguous program.
pub const CUE_PROGRAMS: [u8; 2] = [16, 64];

const PITCH_RANGE: std::ops::RangeInclusive<u8> = 40..=84;
const DRUM_PITCHES: [u8; 4] = [36, 38, 42, 46];
const GRID_S: f64 = 0.05;
/// 1 ms ticks at 120 bpm, so every 10 ms time lands on a tick.
pub const MIDI_PPQ: u16 = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusMode {
    Standard,
    /// Tracks come in pairs with identical audio after the first window; the
    /// program of the piano part is only identifiable from the cue instrument
    /// in window 0.
    Disambiguation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_tracks: usize,
    pub track_seconds: f64,
    pub min_instruments: usize,
    pub max_instruments: usize,
    pub drums: bool,
    pub notes_per_track: usize,
    pub polyphony: usize,
    /// Window length used by disambiguation mode to keep notes inside windows.
    pub window_seconds: f64,
    pub mode: CorpusMode,
    /// Disambiguation mode: every window replays one of this many riffs (separate
    /// pools for the cue and the ambiguous part); 0 draws fresh notes per window.
    pub riff_pool: usize,
    /// Seed of the riff pool, kept apart from `seed` so corpora with different
    /// seeds can share riffs.
    pub riff_seed: u64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_tracks: 16,
            track_seconds: 4.096,
            min_instruments: 1,
            max_instruments: 2,
            drums: false,
            notes_per_track: 10,
            polyphony: 2,
            window_seconds: 2.048,
            mode: CorpusMode::Standard,
            riff_pool: 4,
            riff_seed: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid synthetic spec: {0}")]
    Spec(&'static str),
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTrack {
    pub name: String,
    pub notes: NoteSequence,
    pub audio: AudioBuffer,
    pub split: Split,
    /// Ambiguous program of a disambiguation track.
    pub context_program: Option<u8>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.n_tracks == 0 {
            return Err(DatasetError::Spec("n_tracks must be positive"));
        }
        if !(self.track_seconds > 0.5 && self.track_seconds.is_finite()) {
            return Err(DatasetError::Spec("track_seconds must exceed 0.5"));
        }
        if self.min_instruments == 0
            || self.min_instruments > self.max_instruments
            || self.max_instruments > 4
        {
            return Err(DatasetError::Spec(
                "instruments per track must satisfy 1 <= min <= max <= 4",
            ));
        }
        if self.polyphony == 0 {
            return Err(DatasetError::Spec("polyphony must be positive"));
        }
        if self.mode == CorpusMode::Disambiguation {
            if self.n_tracks % 2 != 0 {
                return Err(DatasetError::Spec(
                    "disambiguation corpora need an even track count",
                ));
            }
            if self.track_seconds < 2.0 * self.window_seconds {
                return Err(DatasetError::Spec(
                    "disambiguation tracks need at least two windows",
                ));
            }
        }
        Ok(())
    }
}

/// Track counts for a 90:5:5 split by the largest-remainder rule; ties go to the
/// earlier split.
pub fn split_counts(n: usize) -> [usize; 3] {
    let shares = [90usize, 5, 5];
    let mut counts = shares.map(|s| n * s / 100);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(n * shares[i] % 100));
    let left = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(left) {
        counts[i] += 1;
    }
    counts
}

/// Split of each track index: the first tracks train, then val, then test.
pub fn assign_splits(n: usize) -> Vec<Split> {
    let [tr, va, te] = split_counts(n);
    std::iter::repeat_n(Split::Train, tr)
        .chain(std::iter::repeat_n(Split::Val, va))
        .chain(std::iter::repeat_n(Split::Test, te))
        .collect()
}

fn track_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index as u64 + 1);
    r
}

fn grid(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let steps = ((hi - lo) / GRID_S).floor().max(0.0) as u32;
    lo + f64::from(rng.random_range(0..=steps)) * GRID_S
}

fn fits(notes: &[NoteEvent], cand: &NoteEvent, polyphony: usize) -> bool {
    let end = |n: &NoteEvent| {
        if n.is_drum {
            n.onset_s + 0.03
        } else {
            n.offset_s
        }
    };
    let overlapping: Vec<&NoteEvent> = notes
        .iter()
        .filter(|n| n.onset_s < end(cand) && cand.onset_s < end(n))
        .collect();
    let same_key = overlapping
        .iter()
        .any(|n| n.pitch == cand.pitch && n.is_drum == cand.is_drum && n.program == cand.program);
    // overlap count against the candidate bounds the polyphony it can create
    !same_key && overlapping.len() < polyphony
}

/// Draws up to `count` notes inside `[lo, hi)` for the given instruments.
/// `None` in `instruments` stands for drums.
fn draw_notes(
    rng: &mut ChaCha8Rng,
    notes: &mut Vec<NoteEvent>,
    instruments: &[Option<u8>],
    lo: f64,
    hi: f64,
    count: usize,
    polyphony: usize,
) {
    let mut placed = 0;
    for _ in 0..count * 50 {
        if placed == count || hi - lo < 0.2 {
            break;
        }
        let onset = grid(rng, lo, hi - 0.15);
        let cand = match instruments[rng.random_range(0..instruments.len())] {
            None => NoteEvent::drum(onset, DRUM_PITCHES[rng.random_range(0..DRUM_PITCHES.len())]),
            Some(program) => {
                let dur = GRID_S * f64::from(rng.random_range(2..=8u32));
                let offset = (onset + dur).min(hi - 0.05);
                if offset - onset < 0.1 - 1e-9 {
                    continue;
                }
                NoteEvent::new(onset, offset, rng.random_range(PITCH_RANGE), program)
            }
        };
        if fits(notes, &cand, polyphony) {
            notes.push(cand);
            placed += 1;
        }
    }
}

fn round_times(notes: Vec<NoteEvent>) -> Vec<NoteEvent> {
    // keep times exact on the 10 ms grid so MIDI and token round trips are lossless
    let r = |t: f64| (t * 100.0).round() / 100.0;
    notes
        .into_iter()
        .map(|n| NoteEvent {
            onset_s: r(n.onset_s),
            offset_s: r(n.offset_s),
            ..n
        })
        .collect()
}

fn standard_track(spec: &SyntheticSpec, index: usize) -> NoteSequence {
    let mut rng = track_rng(spec.seed, index);
    let k = rng.random_range(spec.min_instruments..=spec.max_instruments);
    let mut instruments: Vec<Option<u8>> = sample(&mut rng, PROGRAM_PALETTE.len(), k)
        .into_iter()
        .map(|i| Some(PROGRAM_PALETTE[i]))
        .collect();
    if spec.drums {
        instruments.push(None);
    }
    let mut notes = Vec::new();
    draw_notes(
        &mut rng,
        &mut notes,
        &instruments,
        0.0,
        spec.track_seconds,
        spec.notes_per_track,
        spec.polyphony,
    );
    NoteSequence::new(round_times(notes), spec.track_seconds)
}

/// Both members of pair `pair`. Window 0 holds only the variant's cue part; later
/// windows hold the shared ambiguous part, whose program is set by the variant.
fn disambiguation_pair(spec: &SyntheticSpec, pair: usize) -> [NoteSequence; 2] {
    let w = spec.window_seconds;
    let n_windows = (spec.track_seconds / w).floor() as usize;
    let per_window = spec.notes_per_track.div_ceil(n_windows).max(1);
    // program 200 marks the cue part, 201 the ambiguous part, until variants are applied
    let (cue, main) = (Some(200u8), Some(201u8));
    let pool = |part: Option<u8>, stream: u64| -> Vec<Vec<NoteEvent>> {
        (0..spec.riff_pool as u64)
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.riff_seed);
                rng.set_stream(stream - r);
                let mut notes = Vec::new();
                draw_notes(
                    &mut rng,
                    &mut notes,
                    &[part],
                    GRID_S,
                    w - GRID_S,
                    per_window,
                    spec.polyphony,
                );
                notes
            })
            .collect()
    };
    let main_riffs = pool(main, u64::MAX);
    let mut rng = track_rng(spec.seed, pair);
    let mut notes = Vec::new();
    for k in 1..n_windows {
        let (lo, hi) = (k as f64 * w + GRID_S, (k + 1) as f64 * w - GRID_S);
        if main_riffs.is_empty() {
            draw_notes(
                &mut rng,
                &mut notes,
                &[main],
                lo,
                hi,
                per_window,
                spec.polyphony,
            );
        } else {
            let shift = k as f64 * w;
            let riff = &main_riffs[rng.random_range(0..main_riffs.len())];
            notes.extend(riff.iter().map(|n| NoteEvent {
                onset_s: n.onset_s + shift,
                offset_s: n.offset_s + shift,
                ..*n
            }));
        }
    }
    // each variant has its own cue material, so window 0 differs in pitch as well as timbre
    let cue_riffs = [pool(cue, u64::MAX / 2), pool(cue, u64::MAX / 4)];
    let pick = rng.random_range(0..spec.riff_pool.max(1));
    let cues = cue_riffs.map(|riffs| {
        riffs.get(pick).cloned().unwrap_or_else(|| {
            let mut n = Vec::new();
            draw_notes(
                &mut rng,
                &mut n,
                &[cue],
                GRID_S,
                w - GRID_S,
                per_window,
                spec.polyphony,
            );
            n
        })
    });
    [0, 1].map(|v| {
        let mapped = round_times(cues[v].iter().chain(&notes).copied().collect())
            .into_iter()
            .map(|n| NoteEvent {
                program: if n.program == 200 {
                    CUE_PROGRAMS[v]
                } else {
                    AMBIGUOUS_PROGRAMS[v]
                },
                ..n
            })
            .collect();
        NoteSequence::new(mapped, spec.track_seconds)
    })
}

/// Generates every track in memory. Output depends only on `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticTrack>, DatasetError> {
    spec.validate()?;
    Ok((0..spec.n_tracks)
        .map(|i| generate_track(spec, i))
        .collect())
}

/// Track `index` of the corpus `spec` describes; tracks are independent, so they
/// can be generated in any order. `spec` must be valid.
pub fn generate_track(spec: &SyntheticSpec, index: usize) -> SyntheticTrack {
    let (notes, context_program) = match spec.mode {
        CorpusMode::Standard => (standard_track(spec, index), None),
        CorpusMode::Disambiguation => {
            let [a, b] = disambiguation_pair(spec, index / 2);
            if index % 2 == 0 {
                (a, Some(AMBIGUOUS_PROGRAMS[0]))
            } else {
                (b, Some(AMBIGUOUS_PROGRAMS[1]))
            }
        }
    };
    let audio = synthesize_additive(&notes, MODEL_SAMPLE_RATE);
    SyntheticTrack {
        name: track_name(index),
        notes,
        audio,
        split: assign_splits(spec.n_tracks)[index],
        context_program,
    }
}

pub fn track_name(index: usize) -> String {
    format!("track_{index:04}")
}

/// Writes `midi/<name>.mid`, `audio/<name>.wav` and `manifest.jsonl` under `out_dir`.
/// Manifest paths are relative to `out_dir`.
pub fn write_dataset(
    out_dir: &Path,
    tracks: &[SyntheticTrack],
) -> Result<Vec<ManifestRecord>, DatasetError> {
    fs::create_dir_all(out_dir.join("midi"))?;
    fs::create_dir_all(out_dir.join("audio"))?;
    let mut records = Vec::with_capacity(tracks.len());
    for t in tracks {
        let midi_path = format!("midi/{}.mid", t.name);
        let audio_path = format!("audio/{}.wav", t.name);
        fs::write(out_dir.join(&midi_path), write_smf(&t.notes, MIDI_PPQ))?;
        t.audio
            .write_wav(BufWriter::new(fs::File::create(out_dir.join(&audio_path))?))?;
        records.push(ManifestRecord {
            audio_path,
            midi_path,
            split: t.split,
        });
    }
    write_manifest(
        BufWriter::new(fs::File::create(out_dir.join("manifest.jsonl"))?),
        &records,
    )?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::parse_smf;

    #[test]
    fn split_examples() {
        assert_eq!(split_counts(20), [18, 1, 1]);
        assert_eq!(split_counts(16), [14, 1, 1]);
        assert_eq!(split_counts(1), [1, 0, 0]);
        assert_eq!(split_counts(0), [0, 0, 0]);
        for n in 0..300 {
            assert_eq!(split_counts(n).iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn tracks_are_valid_and_deterministic() {
        let spec = SyntheticSpec {
            drums: true,
            max_instruments: 4,
            polyphony: 3,
            ..SyntheticSpec::default()
        };
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        for t in &a {
            assert!(!t.notes.is_empty());
            assert!(t.notes.notes().iter().all(NoteEvent::is_valid));
            assert!(t.notes.max_polyphony() <= 3);
            let back = parse_smf(&write_smf(&t.notes, MIDI_PPQ)).unwrap();
            let back = back.sequence;
            assert_eq!(back.len(), t.notes.len());
            for (x, y) in back.notes().iter().zip(t.notes.notes()) {
                assert!(
                    (x.onset_s - y.onset_s).abs() < 1e-9 && (x.offset_s - y.offset_s).abs() < 1e-9
                );
                assert_eq!(
                    (x.pitch, x.program, x.is_drum),
                    (y.pitch, y.program, y.is_drum)
                );
            }
            assert_eq!(
                t.audio.samples.len(),
                (spec.track_seconds * 16_000.0).ceil() as usize
            );
        }
    }

    #[test]
    fn disambiguation_pairs_share_everything_after_the_cue_window() {
        let spec = SyntheticSpec {
            n_tracks: 4,
            track_seconds: 6.144,
            notes_per_track: 12,
            mode: CorpusMode::Disambiguation,
            ..SyntheticSpec::default()
        };
        let t = generate(&spec).unwrap();
        let (a, b) = (&t[0], &t[1]);
        assert_eq!(a.context_program, Some(0));
        assert_eq!(b.context_program, Some(1));
        let later = |s: &NoteSequence| -> Vec<NoteEvent> {
            s.notes()
                .iter()
                .filter(|n| n.onset_s >= 2.048)
                .copied()
                .collect()
        };
        let (la, lb) = (later(&a.notes), later(&b.notes));
        assert!(!la.is_empty() && la.len() == lb.len());
        for (x, y) in la.iter().zip(&lb) {
            assert_eq!(
                (x.onset_s, x.offset_s, x.pitch),
                (y.onset_s, y.offset_s, y.pitch)
            );
            assert_eq!((x.program, y.program), (0, 1));
        }
        for n in a.notes.notes().iter().chain(b.notes.notes()) {
            assert!(
                n.offset_s <= 2.048 || n.onset_s >= 2.048,
                "notes stay inside windows"
            );
            if n.onset_s < 2.048 {
                assert!(CUE_PROGRAMS.contains(&n.program));
            }
        }
        let cut = (2.048 * 16_000.0) as usize;
        assert_eq!(a.audio.samples[cut..], b.audio.samples[cut..]);
        assert_ne!(a.audio.samples[..cut], b.audio.samples[..cut]);
    }
}
