//! Frame windows, prior-window sampling and training pairs.

use std::io::{BufRead, Write};

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;
use crate::codec::{encode_segment, time_bins_for, SegmentWindow, TokenSeq, Vocab};
use crate::notes::NoteSequence;
use crate::spectral::{FrameMatrix, LogMel, SpectralError, FRAME_HOP_S, N_MELS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    /// Frames per window, `N_f`.
    pub frames_per_window: usize,
    /// Token budget per window, `N_t`.
    pub max_tokens: usize,
    pub frames_per_segment: usize,
    /// Largest prior hop `L_max_hop`.
    pub max_hop: usize,
    pub batch_segments: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            frames_per_window: 256,
            max_tokens: 1024,
            frames_per_segment: 2000,
            max_hop: 1,
            batch_segments: 12,
        }
    }
}

impl SegmentConfig {
    pub fn window_seconds(&self) -> f64 {
        self.frames_per_window as f64 * FRAME_HOP_S
    }

    pub fn time_bins(&self) -> u32 {
        time_bins_for(self.window_seconds())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.time_bins())
    }

    /// Time span of a full window starting at frame `i` (frames may run past the audio).
    pub fn window_at(&self, i: usize) -> SegmentWindow {
        let start = i as f64 * FRAME_HOP_S;
        SegmentWindow::new(start, start + self.window_seconds())
    }
}

/// Window start frames `0, N_f, 2 N_f, ...` covering `total_frames`; the last may be partial.
pub fn window_grid(total_frames: usize, frames_per_window: usize) -> Vec<usize> {
    assert!(frames_per_window > 0);
    (0..total_frames).step_by(frames_per_window).collect()
}

/// Frame range `[i - hop N_f, i + (1 - hop) N_f)` of the prior window. Negative
/// starts mean the prior falls before the track.
pub fn prior_window(i: usize, hop: usize, frames_per_window: usize) -> (isize, isize) {
    let (i, hop, nf) = (i as isize, hop as isize, frames_per_window as isize);
    (i - hop * nf, i + (1 - hop) * nf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriorWindow {
    pub start: isize,
    pub end: isize,
    pub hop: usize,
}

impl PriorWindow {
    /// True when the prior starts before frame 0 and the memory is empty.
    pub fn is_empty(&self) -> bool {
        self.start < 0
    }
}

/// Draws `L_hop` uniformly from `1..=max_hop` and returns the matching prior window.
pub fn sample_prior_window<R: Rng + ?Sized>(
    i: usize,
    cfg: &SegmentConfig,
    rng: &mut R,
) -> PriorWindow {
    let hop = rng.random_range(1..=cfg.max_hop.max(1));
    let (start, end) = prior_window(i, hop, cfg.frames_per_window);
    PriorWindow { start, end, hop }
}

/// One supervised example. Token ids are PAD-padded to `N_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub frames: FrameMatrix,
    /// Rows of `frames` backed by audio; the rest are zero padding.
    pub valid_frames: usize,
    pub window: SegmentWindow,
    pub target: Vec<u32>,
    pub prior: Vec<u32>,
    pub hop: usize,
}

impl TrainingPair {
    pub fn target_tokens(&self, vocab: &Vocab) -> TokenSeq {
        strip_pad(vocab, &self.target)
    }

    pub fn prior_is_empty(&self) -> bool {
        self.prior.iter().all(|&t| t == Vocab::PAD)
    }
}

fn strip_pad(vocab: &Vocab, ids: &[u32]) -> TokenSeq {
    let end = ids
        .iter()
        .rposition(|&t| t != Vocab::PAD)
        .map_or(0, |p| p + 1);
    vocab
        .decode_ids(&ids[..end])
        .expect("ids come from the same vocabulary")
}

/// Computes log-mel frames for `audio` and cuts them into training pairs.
pub fn make_training_pairs<R: Rng + ?Sized>(
    audio: &AudioBuffer,
    notes: &NoteSequence,
    cfg: &SegmentConfig,
    rng: &mut R,
) -> Result<Vec<TrainingPair>, SpectralError> {
    let frames = LogMel::new().compute(audio)?;
    Ok(pairs_from_frames(&frames, notes, cfg, rng))
}

pub fn pairs_from_frames<R: Rng + ?Sized>(
    frames: &FrameMatrix,
    notes: &NoteSequence,
    cfg: &SegmentConfig,
    rng: &mut R,
) -> Vec<TrainingPair> {
    let nf = cfg.frames_per_window;
    let total = frames.nrows();
    let vocab = cfg.vocab();
    let bins = vocab.time_bins();
    let encode = |w: SegmentWindow| {
        let toks = encode_segment(notes, w, bins, cfg.max_tokens);
        vocab
            .padded_ids(&toks, cfg.max_tokens)
            .expect("encoder emits in-vocabulary tokens")
    };
    window_grid(total, nf)
        .into_iter()
        .map(|i| {
            let valid = nf.min(total - i);
            let mut win = Array2::<f32>::zeros((nf, N_MELS));
            win.slice_mut(s![..valid, ..])
                .assign(&frames.slice(s![i..i + valid, ..]));
            let start = i as f64 * FRAME_HOP_S;
            let window = SegmentWindow::new(start, (i + valid) as f64 * FRAME_HOP_S);
            let pw = sample_prior_window(i, cfg, rng);
            let prior = if pw.is_empty() {
                vec![Vocab::PAD; cfg.max_tokens]
            } else {
                encode(SegmentWindow::new(
                    pw.start as f64 * FRAME_HOP_S,
                    pw.end as f64 * FRAME_HOP_S,
                ))
            };
            TrainingPair {
                frames: win,
                valid_frames: valid,
                window,
                target: encode(window),
                prior,
                hop: pw.hop,
            }
        })
        .collect()
}

/// Picks `size` consecutive windows as `(track, window)` indices, starting from a
/// uniformly random window of `track`. When the track runs out the batch continues
/// with a consecutive run from another randomly drawn track.
pub fn batch_consecutive<R: Rng + ?Sized>(
    track_lens: &[usize],
    track: usize,
    size: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    assert!(
        track_lens.iter().any(|&n| n > 0),
        "need at least one window"
    );
    let mut out = Vec::with_capacity(size);
    let mut cur = track;
    while out.len() < size {
        let len = track_lens[cur];
        let take = len.min(size - out.len());
        if take > 0 {
            let start = rng.random_range(0..=len - take);
            out.extend((start..start + take).map(|w| (cur, w)));
        }
        cur = rng.random_range(0..track_lens.len());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub audio_path: String,
    pub midi_path: String,
    pub split: Split,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
}

pub fn write_manifest<W: Write>(mut w: W, records: &[ManifestRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<ManifestRecord>, ManifestError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| ManifestError::Parse {
                line: n + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Token;
    use crate::notes::NoteEvent;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> SegmentConfig {
        SegmentConfig {
            frames_per_window: 256,
            max_tokens: 64,
            ..SegmentConfig::default()
        }
    }

    #[test]
    fn grid_examples() {
        assert_eq!(
            window_grid(2000, 256),
            vec![0, 256, 512, 768, 1024, 1280, 1536, 1792]
        );
        assert!(window_grid(0, 256).is_empty());
        assert_eq!(window_grid(256, 256), vec![0]);
    }

    #[test]
    fn prior_window_examples() {
        assert_eq!(prior_window(256, 1, 256), (0, 256));
        assert_eq!(prior_window(512, 2, 256), (0, 256));
        assert!(prior_window(0, 1, 256).0 < 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SegmentConfig {
            max_hop: 3,
            ..small_cfg()
        };
        for _ in 0..100 {
            let pw = sample_prior_window(0, &cfg, &mut rng);
            assert!(pw.is_empty());
            assert!((1..=3).contains(&pw.hop));
        }
    }

    #[test]
    fn silent_track_targets_are_empty() {
        let audio = AudioBuffer::new(vec![0.0; 16_000], 16_000);
        let cfg = small_cfg();
        let pairs = make_training_pairs(
            &audio,
            &NoteSequence::empty(),
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(pairs.len(), window_grid(125, 256).len());
        for p in &pairs {
            assert_eq!(p.target[..2], [Vocab::TIE, Vocab::EOS]);
            assert!(p.target[2..].iter().all(|&t| t == Vocab::PAD));
            assert_eq!(p.target.len(), 64);
        }
        assert_eq!(pairs[0].valid_frames, 125);
        assert!(pairs[0]
            .frames
            .slice(s![125.., ..])
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn held_note_ties_into_next_window_and_prior_matches_previous_target() {
        let cfg = small_cfg();
        let notes = NoteSequence::new(vec![NoteEvent::new(1.5, 2.5, 60, 0)], 6.0);
        let frames = FrameMatrix::zeros((750, N_MELS));
        let pairs = pairs_from_frames(&frames, &notes, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(pairs.len(), 3);
        let vocab = cfg.vocab();
        let t1 = pairs[1].target_tokens(&vocab);
        assert_eq!(&t1[..3], &[Token::Program(0), Token::Pitch(60), Token::Tie]);
        assert!(pairs[0].prior_is_empty());
        for k in 1..pairs.len() {
            assert_eq!(pairs[k].prior, pairs[k - 1].target);
        }
    }

    #[test]
    fn each_onset_lands_in_exactly_one_target() {
        let cfg = small_cfg();
        let notes: Vec<_> = (0..40)
            .map(|k| {
                NoteEvent::new(
                    k as f64 * 0.137,
                    k as f64 * 0.137 + 0.05,
                    50 + (k % 20) as u8,
                    0,
                )
            })
            .collect();
        let seq = NoteSequence::new(notes, 6.0);
        let frames = FrameMatrix::zeros((750, N_MELS));
        let pairs = pairs_from_frames(
            &frames,
            &seq,
            &SegmentConfig {
                max_tokens: 1024,
                ..cfg
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let vocab = cfg.vocab();
        let ons: usize = pairs
            .iter()
            .map(|p| {
                p.target_tokens(&vocab)
                    .iter()
                    .filter(|t| **t == Token::NoteOn)
                    .count()
            })
            .sum();
        assert_eq!(ons, 40);
    }

    #[test]
    fn batches_are_consecutive_and_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut starts = std::collections::BTreeSet::new();
        for _ in 0..500 {
            let b = batch_consecutive(&[20], 0, 12, &mut rng);
            assert_eq!(b.len(), 12);
            assert!(b.windows(2).all(|w| w[1].1 == w[0].1 + 1));
            starts.insert(b[0].1);
        }
        assert_eq!(
            starts.into_iter().collect::<Vec<_>>(),
            (0..=8).collect::<Vec<_>>()
        );
        assert_eq!(
            batch_consecutive(&[12], 0, 12, &mut rng),
            (0..12).map(|w| (0, w)).collect::<Vec<_>>()
        );
        let b = batch_consecutive(&[5, 30], 0, 12, &mut rng);
        assert_eq!(b.len(), 12);
        assert_eq!(&b[..5], &(0..5).map(|w| (0, w)).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn manifest_round_trip() {
        let recs = vec![
            ManifestRecord {
                audio_path: "a.wav".into(),
                midi_path: "a.mid".into(),
                split: Split::Train,
            },
            ManifestRecord {
                audio_path: "b.wav".into(),
                midi_path: "b.mid".into(),
                split: Split::Test,
            },
        ];
        let mut buf = Vec::new();
        write_manifest(&mut buf, &recs).unwrap();
        assert!(String::from_utf8_lossy(&buf).contains("\"split\":\"test\""));
        assert_eq!(read_manifest(&buf[..]).unwrap(), recs);
        assert!(matches!(
            read_manifest(&b"{}\n"[..]),
            Err(ManifestError::Parse { line: 1, .. })
        ));
    }
}
