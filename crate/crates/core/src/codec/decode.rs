use std::collections::{BTreeMap, BTreeSet};
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use super::grammar::NoteKey;
use super::token::{Token, DRUM_TOKEN_PROGRAM};
use super::SegmentWindow;
use crate::notes::{NoteEvent, NoteSequence};

/// Notes still sounding at a window boundary, keyed by `(program, pitch)` with
/// their onset time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeldNotes(BTreeMap<NoteKey, f64>);

impl HeldNotes {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: NoteKey, onset_s: f64) {
        self.0.insert(key, onset_s);
    }

    pub fn keys(&self) -> impl Iterator<Item = NoteKey> + '_ {
        self.0.keys().copied()
    }

    pub fn onset(&self, key: NoteKey) -> Option<f64> {
        self.0.get(&key).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Closes every held note at `t`.
    pub fn close_all(self, t: f64) -> Vec<NoteEvent> {
        self.0
            .into_iter()
            .filter(|&(_, on)| t > on)
            .map(|((program, pitch), on)| NoteEvent::new(on, t, pitch, program))
            .collect()
    }
}

/// Per-category counts of tokens skipped while decoding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violations {
    pub pitch_without_group: usize,
    pub action_without_program: usize,
    pub missing_tie: usize,
    pub misplaced_tie: usize,
    pub misplaced_sos: usize,
    pub event_without_time: usize,
    pub time_backwards: usize,
    pub drum_in_tie: usize,
    pub tie_not_held: usize,
    pub drum_note_off: usize,
    pub off_without_on: usize,
    pub note_reopened: usize,
    pub zero_length: usize,
}

impl Violations {
    pub fn total(&self) -> usize {
        self.pitch_without_group
            + self.action_without_program
            + self.missing_tie
            + self.misplaced_tie
            + self.misplaced_sos
            + self.event_without_time
            + self.time_backwards
            + self.drum_in_tie
            + self.tie_not_held
            + self.drum_note_off
            + self.off_without_on
            + self.note_reopened
            + self.zero_length
    }
}

impl AddAssign for Violations {
    fn add_assign(&mut self, o: Self) {
        self.pitch_without_group += o.pitch_without_group;
        self.action_without_program += o.action_without_program;
        self.missing_tie += o.missing_tie;
        self.misplaced_tie += o.misplaced_tie;
        self.misplaced_sos += o.misplaced_sos;
        self.event_without_time += o.event_without_time;
        self.time_backwards += o.time_backwards;
        self.drum_in_tie += o.drum_in_tie;
        self.tie_not_held += o.tie_not_held;
        self.drum_note_off += o.drum_note_off;
        self.off_without_on += o.off_without_on;
        self.note_reopened += o.note_reopened;
        self.zero_length += o.zero_length;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedWindow {
    /// Notes completed inside the window, plus drums.
    pub notes: Vec<NoteEvent>,
    /// Notes still open at the window end.
    pub held: HeldNotes,
    pub violations: Violations,
}

impl DecodedWindow {
    pub fn fragment(&self) -> NoteSequence {
        NoteSequence::from_notes(self.notes.clone())
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Action {
    On,
    Off,
}

struct State<'a> {
    window: SegmentWindow,
    prev_held: &'a HeldNotes,
    open: BTreeMap<NoteKey, f64>,
    notes: Vec<NoteEvent>,
    v: Violations,
    in_tie: bool,
    tie_keys: BTreeSet<NoteKey>,
    bin: Option<u16>,
    program: Option<u8>,
    action: Option<Action>,
}

impl State<'_> {
    fn end_tie_section(&mut self) {
        self.in_tie = false;
        let start = self.window.start_s;
        for key in self.prev_held.keys() {
            let onset = self.prev_held.onset(key).expect("key from map");
            if self.tie_keys.contains(&key) {
                self.open.insert(key, onset);
            } else {
                self.close(key, onset, start);
            }
        }
        self.program = None;
        self.action = None;
    }

    fn close(&mut self, (program, pitch): NoteKey, onset: f64, offset: f64) {
        if offset > onset {
            self.notes
                .push(NoteEvent::new(onset, offset, pitch, program));
        } else {
            self.v.zero_length += 1;
        }
    }

    fn group(&mut self, pitch: u8) {
        let (Some(program), Some(action)) = (self.program.take(), self.action.take()) else {
            self.v.pitch_without_group += 1;
            return;
        };
        let Some(bin) = self.bin else {
            self.v.event_without_time += 1;
            return;
        };
        let t = self.window.time_of(bin);
        let key = (program, pitch);
        match action {
            Action::On if program == DRUM_TOKEN_PROGRAM => {
                self.notes.push(NoteEvent::drum(t, pitch))
            }
            Action::On => {
                if let Some(onset) = self.open.insert(key, t) {
                    self.v.note_reopened += 1;
                    self.close(key, onset, t);
                }
            }
            Action::Off if program == DRUM_TOKEN_PROGRAM => self.v.drum_note_off += 1,
            Action::Off => match self.open.remove(&key) {
                Some(onset) => self.close(key, onset, t),
                None => self.v.off_without_on += 1,
            },
        }
    }
}

/// Decodes one window of (possibly malformed) tokens.
///
/// `held` carries notes left open by the previous window. Held notes missing from
/// the tie section are closed at the window start. Malformed tokens are skipped and
/// counted; decoding never fails.
pub fn decode_tokens(tokens: &[Token], window: SegmentWindow, held: &HeldNotes) -> DecodedWindow {
    let mut st = State {
        window,
        prev_held: held,
        open: BTreeMap::new(),
        notes: Vec::new(),
        v: Violations::default(),
        in_tie: true,
        tie_keys: BTreeSet::new(),
        bin: None,
        program: None,
        action: None,
    };
    for (i, &tok) in tokens.iter().enumerate() {
        match tok {
            Token::Sos => {
                if i != 0 {
                    st.v.misplaced_sos += 1;
                }
            }
            Token::Eos | Token::Pad => break,
            Token::Tie => {
                if st.in_tie {
                    st.end_tie_section();
                } else {
                    st.v.misplaced_tie += 1;
                }
            }
            Token::Program(p) => {
                if st.in_tie && p == DRUM_TOKEN_PROGRAM {
                    st.v.drum_in_tie += 1;
                    st.program = None;
                } else {
                    st.program = Some(p);
                }
                st.action = None;
            }
            Token::Pitch(n) if st.in_tie => match st.program.take() {
                Some(p) => {
                    if held.onset((p, n)).is_some() {
                        st.tie_keys.insert((p, n));
                    } else {
                        st.v.tie_not_held += 1;
                    }
                }
                None => st.v.pitch_without_group += 1,
            },
            Token::Pitch(n) => st.group(n),
            Token::Time(_) | Token::NoteOn | Token::NoteOff if st.in_tie => {
                st.v.missing_tie += 1;
                let program = st.program;
                st.end_tie_section();
                st.program = program;
                apply_event_token(&mut st, tok);
            }
            Token::Time(_) | Token::NoteOn | Token::NoteOff => apply_event_token(&mut st, tok),
        }
    }
    if st.in_tie {
        st.v.missing_tie += 1;
        st.end_tie_section();
    }
    let mut new_held = HeldNotes::new();
    for (key, onset) in std::mem::take(&mut st.open) {
        new_held.insert(key, onset);
    }
    DecodedWindow {
        notes: st.notes,
        held: new_held,
        violations: st.v,
    }
}

fn apply_event_token(st: &mut State<'_>, tok: Token) {
    match tok {
        Token::Time(b) => {
            if st.bin.is_some_and(|cur| b < cur) {
                st.v.time_backwards += 1;
            } else {
                st.bin = Some(b);
            }
            st.program = None;
            st.action = None;
        }
        Token::NoteOn | Token::NoteOff => {
            if st.program.is_none() {
                st.v.action_without_program += 1;
                st.action = None;
            } else {
                st.action = Some(if tok == Token::NoteOn {
                    Action::On
                } else {
                    Action::Off
                });
            }
        }
        _ => unreachable!("only event tokens are routed here"),
    }
}

/// Threads held notes through consecutive windows of one track.
#[derive(Debug, Default)]
pub struct TrackDecoder {
    held: HeldNotes,
    notes: Vec<NoteEvent>,
    violations: Violations,
}

impl TrackDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tokens: &[Token], window: SegmentWindow) {
        let out = decode_tokens(tokens, window, &self.held);
        self.notes.extend(out.notes);
        self.held = out.held;
        self.violations += out.violations;
    }

    /// Closes notes still held at `end_s` and returns the stitched track.
    pub fn finish(self, end_s: f64) -> (NoteSequence, Violations) {
        let mut notes = self.notes;
        notes.extend(self.held.close_all(end_s));
        (NoteSequence::new(notes, end_s), self.violations)
    }
}
