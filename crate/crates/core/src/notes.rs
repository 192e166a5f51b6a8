//! Instrument-attributed note lists.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Program id used for drum notes wherever a single instrument number is needed.
pub const DRUM_PROGRAM: u8 = 128;

/// A single note. Drum notes are onset-only and carry `offset_s == onset_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub onset_s: f64,
    pub offset_s: f64,
    pub pitch: u8,
    pub program: u8,
    pub is_drum: bool,
}

impl NoteEvent {
    pub fn new(onset_s: f64, offset_s: f64, pitch: u8, program: u8) -> Self {
        Self {
            onset_s,
            offset_s,
            pitch,
            program,
            is_drum: false,
        }
    }

    pub fn drum(onset_s: f64, pitch: u8) -> Self {
        Self {
            onset_s,
            offset_s: onset_s,
            pitch,
            program: 0,
            is_drum: true,
        }
    }

    /// Instrument id at full granularity: the program, or 128 for drums.
    pub fn instrument(&self) -> u8 {
        if self.is_drum {
            DRUM_PROGRAM
        } else {
            self.program
        }
    }

    /// Whether the note satisfies the value-range and duration invariants.
    pub fn is_valid(&self) -> bool {
        let ranged = self.pitch < 128 && self.program < 128;
        let timed = self.onset_s.is_finite() && self.onset_s >= 0.0 && self.offset_s.is_finite();
        let duration = if self.is_drum {
            self.offset_s == self.onset_s
        } else {
            self.offset_s > self.onset_s
        };
        ranged && timed && duration
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.onset_s
            .total_cmp(&other.onset_s)
            .then(self.is_drum.cmp(&other.is_drum))
            .then(self.program.cmp(&other.program))
            .then(self.pitch.cmp(&other.pitch))
            .then(self.offset_s.total_cmp(&other.offset_s))
    }
}

/// Notes in canonical order `(onset, is_drum, program, pitch)` plus a duration that
/// covers every offset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NoteSequence {
    notes: Vec<NoteEvent>,
    duration_s: f64,
}

impl NoteSequence {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Sorts `notes` canonically and extends `duration_s` to the last offset if needed.
    pub fn new(mut notes: Vec<NoteEvent>, duration_s: f64) -> Self {
        notes.sort_by(NoteEvent::canonical_cmp);
        let last = notes.iter().map(|n| n.offset_s).fold(0.0, f64::max);
        Self {
            notes,
            duration_s: duration_s.max(last),
        }
    }

    pub fn from_notes(notes: Vec<NoteEvent>) -> Self {
        Self::new(notes, 0.0)
    }

    pub fn notes(&self) -> &[NoteEvent] {
        &self.notes
    }

    pub fn into_notes(self) -> Vec<NoteEvent> {
        self.notes
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_s
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    /// Distinct instruments present (programs, with 128 standing for drums).
    pub fn instruments(&self) -> BTreeSet<u8> {
        self.notes.iter().map(NoteEvent::instrument).collect()
    }

    /// Largest number of notes sounding at the same instant. Drums count as sounding
    /// for 30 ms after their onset.
    pub fn max_polyphony(&self) -> usize {
        // (time, +1/-1); ends sort before starts at equal times so abutting notes do not overlap
        let mut edges: Vec<(f64, i32)> = Vec::with_capacity(self.notes.len() * 2);
        for n in &self.notes {
            let end = if n.is_drum {
                n.onset_s + 0.030
            } else {
                n.offset_s
            };
            edges.push((n.onset_s, 1));
            edges.push((end, -1));
        }
        edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (mut cur, mut best) = (0i32, 0i32);
        for (_, d) in edges {
            cur += d;
            best = best.max(cur);
        }
        best.max(0) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_canonically_on_construction() {
        let seq = NoteSequence::from_notes(vec![
            NoteEvent::new(1.0, 2.0, 60, 0),
            NoteEvent::drum(0.5, 36),
            NoteEvent::new(0.5, 1.0, 64, 33),
            NoteEvent::new(0.5, 1.0, 62, 33),
            NoteEvent::new(0.5, 1.0, 70, 0),
        ]);
        let keys: Vec<_> = seq
            .notes()
            .iter()
            .map(|n| (n.onset_s, n.is_drum, n.program, n.pitch))
            .collect();
        assert_eq!(
            keys,
            vec![
                (0.5, false, 0, 70),
                (0.5, false, 33, 62),
                (0.5, false, 33, 64),
                (0.5, true, 0, 36),
                (1.0, false, 0, 60),
            ]
        );
        assert_eq!(seq.duration_s(), 2.0);
    }

    #[test]
    fn empty_sequence_has_zero_duration() {
        let seq = NoteSequence::empty();
        assert_eq!(seq.duration_s(), 0.0);
        assert!(seq.instruments().is_empty());
    }

    #[test]
    fn polyphony_counts_overlaps_only() {
        let seq = NoteSequence::from_notes(vec![
            NoteEvent::new(0.0, 1.0, 60, 0),
            NoteEvent::new(1.0, 2.0, 62, 0),
            NoteEvent::new(0.5, 1.5, 64, 0),
        ]);
        assert_eq!(seq.max_polyphony(), 2);
    }
}
