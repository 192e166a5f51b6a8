//! Onset F1 at three instrument granularities, instrument leakage ratio and
//! instrument detection scores.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Violations;
use crate::notes::{NoteEvent, NoteSequence};

pub const DEFAULT_ONSET_TOLERANCE_S: f64 = 0.050;
/// Absorbs decimal representation error when comparing onset gaps to the tolerance.
const TOL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Flat,
    MidiClass,
    Full,
}

impl Granularity {
    pub const ALL: [Granularity; 3] =
        [Granularity::Flat, Granularity::MidiClass, Granularity::Full];

    pub fn class_of(self, note: &NoteEvent) -> u8 {
        match (self, note.is_drum) {
            (Granularity::Flat, false) => 0,
            (Granularity::Flat, true) => 1,
            (Granularity::MidiClass, false) => note.program / 8,
            (Granularity::MidiClass, true) => 16,
            (Granularity::Full, _) => note.instrument(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Flat => "flat",
            Granularity::MidiClass => "midi_class",
            Granularity::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for MatchCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn harmonic_f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        Self {
            precision,
            recall,
            f1: harmonic_f1(precision, recall),
        }
    }

    pub fn from_counts(c: MatchCounts) -> Self {
        Self::new(ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
    }
}

/// Maximum bipartite matching by augmenting paths; `adj[r]` lists the right
/// vertices adjacent to left vertex `r`.
pub fn max_matching(adj: &[Vec<usize>], n_right: usize) -> usize {
    fn augment(
        r: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for &e in &adj[r] {
            if seen[e] {
                continue;
            }
            seen[e] = true;
            if owner[e].is_none_or(|o| augment(o, adj, seen, owner)) {
                owner[e] = Some(r);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; n_right];
    let mut seen = vec![false; n_right];
    let mut size = 0;
    for r in 0..adj.len() {
        seen.iter_mut().for_each(|s| *s = false);
        if augment(r, adj, &mut seen, &mut owner) {
            size += 1;
        }
    }
    size
}

/// Onset-only matching: a reference and an estimated note may pair when pitch and
/// granularity class agree and onsets differ by at most `tol_s`.
pub fn onset_match(
    reference: &NoteSequence,
    estimate: &NoteSequence,
    gran: Granularity,
    tol_s: f64,
) -> MatchCounts {
    let mut by_key: HashMap<(u8, u8), Vec<usize>> = HashMap::new();
    for (j, n) in estimate.notes().iter().enumerate() {
        by_key
            .entry((n.pitch, gran.class_of(n)))
            .or_default()
            .push(j);
    }
    let est = estimate.notes();
    let adj: Vec<Vec<usize>> = reference
        .notes()
        .iter()
        .map(|r| {
            by_key
                .get(&(r.pitch, gran.class_of(r)))
                .map(|cands| {
                    cands
                        .iter()
                        .copied()
                        .filter(|&j| (est[j].onset_s - r.onset_s).abs() <= tol_s + TOL_EPS)
                        .collect()
                })
                .unwrap_or_default()
        })
        .collect();
    let tp = max_matching(&adj, est.len());
    MatchCounts {
        tp,
        fp: est.len() - tp,
        fn_: reference.len() - tp,
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no ground-truth instruments in the corpus; leakage ratio undefined")]
    EmptyGroundTruth,
}

/// Corpus leakage ratio `sum |I_tr| / sum |I_gt|` over `(reference, estimate)` pairs.
pub fn instrument_leakage_ratio(
    pairs: &[(&NoteSequence, &NoteSequence)],
) -> Result<f64, MetricsError> {
    let (num, den) = pairs.iter().fold((0, 0), |(n, d), (r, e)| {
        (n + e.instruments().len(), d + r.instruments().len())
    });
    if den == 0 {
        return Err(MetricsError::EmptyGroundTruth);
    }
    Ok(num as f64 / den as f64)
}

/// Precision and recall of the predicted instrument set. An empty prediction has
/// precision 0; an empty reference has recall 1 only if the prediction is empty too.
pub fn instrument_set_prf(gt: &BTreeSet<u8>, tr: &BTreeSet<u8>) -> Prf {
    let hit = gt.intersection(tr).count();
    let p = ratio(hit, tr.len());
    let r = match (gt.is_empty(), tr.is_empty()) {
        (true, true) => 1.0,
        (true, false) => 0.0,
        _ => ratio(hit, gt.len()),
    };
    Prf::new(p, r)
}

pub fn instrument_detection_prf(reference: &NoteSequence, estimate: &NoteSequence) -> Prf {
    instrument_set_prf(&reference.instruments(), &estimate.instruments())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerGranularity<T> {
    pub flat: T,
    pub midi_class: T,
    pub full: T,
}

impl<T> PerGranularity<T> {
    pub fn get(&self, g: Granularity) -> &T {
        match g {
            Granularity::Flat => &self.flat,
            Granularity::MidiClass => &self.midi_class,
            Granularity::Full => &self.full,
        }
    }

    pub fn get_mut(&mut self, g: Granularity) -> &mut T {
        match g {
            Granularity::Flat => &mut self.flat,
            Granularity::MidiClass => &mut self.midi_class,
            Granularity::Full => &mut self.full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackReport {
    pub track: String,
    pub counts: PerGranularity<MatchCounts>,
    pub onset: PerGranularity<Prf>,
    pub instruments_tr: usize,
    pub instruments_gt: usize,
    pub instrument: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tolerance_s: f64,
    pub tracks: Vec<TrackReport>,
    /// Micro-averaged over all tracks.
    pub counts: PerGranularity<MatchCounts>,
    pub onset: PerGranularity<Prf>,
    pub phi_num: usize,
    pub phi_den: usize,
    /// `None` when the reference corpus has no instruments.
    pub phi: Option<f64>,
    /// Per-track mean.
    pub instrument: Prf,
    pub violations: Violations,
}

/// One track to score: `(name, reference, estimate)`.
pub type NamedPair<'a> = (&'a str, &'a NoteSequence, &'a NoteSequence);

pub fn evaluate_track(
    name: &str,
    reference: &NoteSequence,
    estimate: &NoteSequence,
    tol_s: f64,
) -> TrackReport {
    let mut counts = PerGranularity::<MatchCounts>::default();
    let mut onset = PerGranularity::<Prf>::default();
    for g in Granularity::ALL {
        let c = onset_match(reference, estimate, g, tol_s);
        *counts.get_mut(g) = c;
        *onset.get_mut(g) = Prf::from_counts(c);
    }
    TrackReport {
        track: name.to_string(),
        counts,
        onset,
        instruments_tr: estimate.instruments().len(),
        instruments_gt: reference.instruments().len(),
        instrument: instrument_detection_prf(reference, estimate),
    }
}

/// Scores every track and aggregates in input order.
pub fn evaluate_corpus(pairs: &[NamedPair<'_>], tol_s: f64) -> MetricReport {
    let tracks: Vec<TrackReport> = pairs
        .iter()
        .map(|(n, r, e)| evaluate_track(n, r, e, tol_s))
        .collect();
    let mut counts = PerGranularity::<MatchCounts>::default();
    let (mut num, mut den) = (0, 0);
    let (mut p, mut r) = (0.0, 0.0);
    for t in &tracks {
        for g in Granularity::ALL {
            *counts.get_mut(g) += *t.counts.get(g);
        }
        num += t.instruments_tr;
        den += t.instruments_gt;
        p += t.instrument.precision;
        r += t.instrument.recall;
    }
    let k = tracks.len().max(1) as f64;
    MetricReport {
        tolerance_s: tol_s,
        onset: PerGranularity {
            flat: Prf::from_counts(counts.flat),
            midi_class: Prf::from_counts(counts.midi_class),
            full: Prf::from_counts(counts.full),
        },
        counts,
        phi_num: num,
        phi_den: den,
        phi: (den > 0).then(|| num as f64 / den as f64),
        // macro F1 is the mean of per-track F1, not F1 of the mean P and R
        instrument: Prf {
            precision: p / k,
            recall: r / k,
            f1: tracks.iter().map(|t| t.instrument.f1).sum::<f64>() / k,
        },
        tracks,
        violations: Violations::default(),
    }
}
