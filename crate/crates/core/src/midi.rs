//! Standard MIDI File reading and writing.
//!
//! Reading accepts format 0 and 1 files with metrical timing. Notes are paired per
//! (track, channel, pitch) in FIFO order, a velocity-0 note-on counts as a note-off,
//! and channel 10 (index 9) is treated as drums. Writing always produces a format 1
//! file at a fixed 120 bpm with one track per instrument.

use std::collections::{BTreeMap, HashMap, VecDeque};

use thiserror::Error;

use crate::notes::{NoteEvent, NoteSequence};

const DRUM_CHANNEL: u8 = 9;
const DEFAULT_TEMPO_US: u32 = 500_000;
const WRITE_VELOCITY: u8 = 100;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid MIDI file at byte {offset}: {kind}")]
pub struct SmfError {
    pub offset: usize,
    pub kind: SmfErrorKind,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SmfErrorKind {
    #[error("unexpected end of data")]
    UnexpectedEof,
    #[error("missing MThd header")]
    MissingHeader,
    #[error("header length {0} is shorter than 6")]
    BadHeaderLength(u32),
    #[error("unsupported SMF format {0}")]
    UnsupportedFormat(u16),
    #[error("SMPTE time division is not supported")]
    SmpteTiming,
    #[error("ticks per quarter note must be positive")]
    ZeroDivision,
    #[error("expected MTrk chunk")]
    MissingTrack,
    #[error("variable-length quantity longer than 4 bytes")]
    BadVarLen,
    #[error("data byte without running status")]
    NoRunningStatus,
    #[error("invalid status byte {0:#04x}")]
    BadStatus(u8),
    #[error("invalid tempo meta event")]
    BadTempo,
}

/// Recoverable irregularities found while reading.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SmfWarnings {
    /// Note-ons never followed by a matching note-off; closed at end of track.
    pub dangling_notes: usize,
    /// Non-drum notes whose note-off fell on the note-on tick; dropped.
    pub zero_length_notes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedSmf {
    pub sequence: NoteSequence,
    pub warnings: SmfWarnings,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, kind: SmfErrorKind) -> SmfError {
        SmfError {
            offset: self.pos,
            kind,
        }
    }

    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, SmfError> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| self.err(SmfErrorKind::UnexpectedEof))?;
        self.pos += 1;
        Ok(b)
    }

    fn peek(&self) -> Result<u8, SmfError> {
        self.data
            .get(self.pos)
            .copied()
            .ok_or_else(|| self.err(SmfErrorKind::UnexpectedEof))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], SmfError> {
        if self.remaining() < n {
            return Err(self.err(SmfErrorKind::UnexpectedEof));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, SmfError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, SmfError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn var_len(&mut self) -> Result<u32, SmfError> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(SmfError {
            offset: start,
            kind: SmfErrorKind::BadVarLen,
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum RawKind {
    NoteOn { channel: u8, pitch: u8 },
    NoteOff { channel: u8, pitch: u8 },
    Program { channel: u8, program: u8 },
    Tempo(u32),
    EndOfTrack,
}

#[derive(Debug, Clone, Copy)]
struct RawEvent {
    tick: u64,
    track: usize,
    seq: usize,
    kind: RawKind,
}

fn read_track(
    cur: &mut Cursor<'_>,
    track: usize,
    events: &mut Vec<RawEvent>,
) -> Result<u64, SmfError> {
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let push = |events: &mut Vec<RawEvent>, tick: u64, kind: RawKind| {
        let seq = events.len();
        events.push(RawEvent {
            tick,
            track,
            seq,
            kind,
        });
    };
    while cur.remaining() > 0 {
        tick += u64::from(cur.var_len()?);
        let status_pos = cur.pos;
        let first = cur.peek()?;
        let status = if first & 0x80 != 0 {
            cur.pos += 1;
            first
        } else {
            running.ok_or(SmfError {
                offset: status_pos,
                kind: SmfErrorKind::NoRunningStatus,
            })?
        };
        match status {
            0xff => {
                let meta = cur.u8()?;
                let len = cur.var_len()? as usize;
                let data = cur.take(len)?;
                match meta {
                    0x51 => {
                        if data.len() != 3 {
                            return Err(SmfError {
                                offset: status_pos,
                                kind: SmfErrorKind::BadTempo,
                            });
                        }
                        let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        if us == 0 {
                            return Err(SmfError {
                                offset: status_pos,
                                kind: SmfErrorKind::BadTempo,
                            });
                        }
                        push(events, tick, RawKind::Tempo(us));
                    }
                    0x2f => {
                        push(events, tick, RawKind::EndOfTrack);
                        break;
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = cur.var_len()? as usize;
                cur.take(len)?;
            }
            0x80..=0xef => {
                running = Some(status);
                let channel = status & 0x0f;
                let a = cur.u8()?;
                match status & 0xf0 {
                    0x80 => {
                        cur.u8()?;
                        push(
                            events,
                            tick,
                            RawKind::NoteOff {
                                channel,
                                pitch: a & 0x7f,
                            },
                        );
                    }
                    0x90 => {
                        let velocity = cur.u8()? & 0x7f;
                        let pitch = a & 0x7f;
                        let kind = if velocity == 0 {
                            RawKind::NoteOff { channel, pitch }
                        } else {
                            RawKind::NoteOn { channel, pitch }
                        };
                        push(events, tick, kind);
                    }
                    0xc0 => push(
                        events,
                        tick,
                        RawKind::Program {
                            channel,
                            program: a & 0x7f,
                        },
                    ),
                    0xd0 => {}
                    _ => {
                        cur.u8()?;
                    }
                }
            }
            other => {
                return Err(SmfError {
                    offset: status_pos,
                    kind: SmfErrorKind::BadStatus(other),
                })
            }
        }
    }
    Ok(tick)
}

/// Piecewise-linear tick to seconds conversion.
struct TempoMap {
    ppq: f64,
    // (tick, seconds at tick, microseconds per quarter note from tick on)
    segments: Vec<(u64, f64, u32)>,
}

impl TempoMap {
    fn new(ppq: u16, mut changes: Vec<(u64, u32)>) -> Self {
        changes.sort_by_key(|c| c.0);
        let ppq = f64::from(ppq);
        let mut segments = vec![(0u64, 0.0f64, DEFAULT_TEMPO_US)];
        for (tick, tempo) in changes {
            let &(t0, s0, us) = segments.last().expect("non-empty");
            let s = s0 + (tick - t0) as f64 * f64::from(us) / 1e6 / ppq;
            if tick == t0 {
                segments.pop();
            }
            segments.push((tick, s, tempo));
        }
        Self { ppq, segments }
    }

    fn seconds(&self, tick: u64) -> f64 {
        let idx = self
            .segments
            .partition_point(|s| s.0 <= tick)
            .saturating_sub(1);
        let (t0, s0, us) = self.segments[idx];
        s0 + (tick - t0) as f64 * f64::from(us) / 1e6 / self.ppq
    }
}

/// Parses a format 0 or 1 Standard MIDI File into a canonical [`NoteSequence`].
pub fn parse_smf(bytes: &[u8]) -> Result<ParsedSmf, SmfError> {
    let mut cur = Cursor {
        data: bytes,
        pos: 0,
    };
    if cur
        .take(4)
        .map_err(|_| cur.err(SmfErrorKind::MissingHeader))?
        != b"MThd"
    {
        return Err(SmfError {
            offset: 0,
            kind: SmfErrorKind::MissingHeader,
        });
    }
    let header_len = cur.u32()?;
    if header_len < 6 {
        return Err(SmfError {
            offset: 4,
            kind: SmfErrorKind::BadHeaderLength(header_len),
        });
    }
    let header_start = cur.pos;
    let format = cur.u16()?;
    if format > 1 {
        return Err(SmfError {
            offset: header_start,
            kind: SmfErrorKind::UnsupportedFormat(format),
        });
    }
    let ntracks = cur.u16()?;
    let division_pos = cur.pos;
    let division = cur.u16()?;
    if division & 0x8000 != 0 {
        return Err(SmfError {
            offset: division_pos,
            kind: SmfErrorKind::SmpteTiming,
        });
    }
    if division == 0 {
        return Err(SmfError {
            offset: division_pos,
            kind: SmfErrorKind::ZeroDivision,
        });
    }
    cur.take(header_len as usize - 6)?;

    let mut events = Vec::new();
    let mut track_ends = Vec::new();
    let mut track = 0usize;
    while track < usize::from(ntracks) && cur.remaining() > 0 {
        let chunk_pos = cur.pos;
        let id = cur.take(4)?;
        let len = cur.u32()? as usize;
        if cur.remaining() < len {
            return Err(SmfError {
                offset: chunk_pos,
                kind: SmfErrorKind::UnexpectedEof,
            });
        }
        let body_start = cur.pos;
        if id != b"MTrk" {
            // alien chunks are skipped
            cur.pos += len;
            continue;
        }
        let mut body = Cursor {
            data: &bytes[..body_start + len],
            pos: body_start,
        };
        track_ends.push(read_track(&mut body, track, &mut events)?);
        cur.pos = body_start + len;
        track += 1;
    }
    if track < usize::from(ntracks) {
        return Err(cur.err(SmfErrorKind::MissingTrack));
    }

    events.sort_by_key(|e| (e.tick, e.track, e.seq));
    let tempo = TempoMap::new(
        division,
        events
            .iter()
            .filter_map(|e| match e.kind {
                RawKind::Tempo(us) => Some((e.tick, us)),
                _ => None,
            })
            .collect(),
    );

    let mut programs: HashMap<(usize, u8), u8> = HashMap::new();
    let mut open: BTreeMap<(usize, u8, u8), VecDeque<(u64, u8)>> = BTreeMap::new();
    let mut notes = Vec::new();
    let mut warnings = SmfWarnings::default();
    let push_note = |notes: &mut Vec<NoteEvent>,
                     warnings: &mut SmfWarnings,
                     on: u64,
                     off: u64,
                     pitch: u8,
                     program: u8| {
        if off <= on {
            warnings.zero_length_notes += 1;
        } else {
            notes.push(NoteEvent::new(
                tempo.seconds(on),
                tempo.seconds(off),
                pitch,
                program,
            ));
        }
    };
    for e in &events {
        match e.kind {
            RawKind::Program { channel, program } => {
                programs.insert((e.track, channel), program);
            }
            RawKind::NoteOn { channel, pitch, .. } => {
                if channel == DRUM_CHANNEL {
                    notes.push(NoteEvent::drum(tempo.seconds(e.tick), pitch));
                } else {
                    let program = programs.get(&(e.track, channel)).copied().unwrap_or(0);
                    open.entry((e.track, channel, pitch))
                        .or_default()
                        .push_back((e.tick, program));
                }
            }
            RawKind::NoteOff { channel, pitch } => {
                if channel == DRUM_CHANNEL {
                    continue;
                }
                if let Some((on, program)) = open
                    .get_mut(&(e.track, channel, pitch))
                    .and_then(VecDeque::pop_front)
                {
                    push_note(&mut notes, &mut warnings, on, e.tick, pitch, program);
                }
            }
            RawKind::Tempo(_) | RawKind::EndOfTrack => {}
        }
    }
    for ((track, _, pitch), queue) in open {
        for (on, program) in queue {
            warnings.dangling_notes += 1;
            push_note(
                &mut notes,
                &mut warnings,
                on,
                track_ends[track],
                pitch,
                program,
            );
        }
    }
    let end_tick = track_ends.iter().copied().max().unwrap_or(0);
    Ok(ParsedSmf {
        sequence: NoteSequence::new(notes, tempo.seconds(end_tick)),
        warnings,
    })
}

fn push_var_len(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

fn push_chunk(out: &mut Vec<u8>, id: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(id);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
}

fn encode_track(mut events: Vec<(u64, u8, [u8; 3])>, end_tick: u64) -> Vec<u8> {
    // order key: tick, then note-offs (0) before program/note-ons
    events.sort_by_key(|e| (e.0, e.1));
    let mut body = Vec::new();
    let mut last = 0u64;
    for (tick, _, msg) in events {
        push_var_len(&mut body, (tick - last) as u32);
        let len = if msg[0] & 0xf0 == 0xc0 { 2 } else { 3 };
        body.extend_from_slice(&msg[..len]);
        last = tick;
    }
    push_var_len(&mut body, (end_tick.max(last) - last) as u32);
    body.extend_from_slice(&[0xff, 0x2f, 0x00]);
    body
}

/// Writes a format 1 file at 120 bpm: a tempo track followed by one track per
/// distinct `(program, is_drum)`.
///
/// # Panics
///
/// Panics if `ppq` is below 24 or above the 15-bit division limit.
pub fn write_smf(seq: &NoteSequence, ppq: u16) -> Vec<u8> {
    assert!((24..0x8000).contains(&ppq), "ppq must be in 24..32768");
    let ticks_per_second = f64::from(ppq) * 1e6 / f64::from(DEFAULT_TEMPO_US);
    let to_tick = |s: f64| (s * ticks_per_second).round().max(0.0) as u64;

    let mut groups: BTreeMap<(bool, u8), Vec<&NoteEvent>> = BTreeMap::new();
    for n in seq.notes() {
        let program = if n.is_drum { 0 } else { n.program };
        groups.entry((n.is_drum, program)).or_default().push(n);
    }

    let mut out = Vec::new();
    let mut header = Vec::new();
    header.extend_from_slice(&1u16.to_be_bytes());
    header.extend_from_slice(&((groups.len() + 1) as u16).to_be_bytes());
    header.extend_from_slice(&ppq.to_be_bytes());
    push_chunk(&mut out, b"MThd", &header);

    let end_tick = to_tick(seq.duration_s());
    let mut tempo = Vec::new();
    tempo.push(0);
    let us = DEFAULT_TEMPO_US.to_be_bytes();
    tempo.extend_from_slice(&[0xff, 0x51, 0x03, us[1], us[2], us[3]]);
    push_var_len(&mut tempo, end_tick as u32);
    tempo.extend_from_slice(&[0xff, 0x2f, 0x00]);
    push_chunk(&mut out, b"MTrk", &tempo);

    let mut melodic_channels = (0u8..16).filter(|&c| c != DRUM_CHANNEL).cycle();
    for ((is_drum, program), notes) in groups {
        let channel = if is_drum {
            DRUM_CHANNEL
        } else {
            melodic_channels.next().expect("cycle")
        };
        let mut events = Vec::with_capacity(notes.len() * 2 + 1);
        if !is_drum {
            events.push((0, 1, [0xc0 | channel, program, 0]));
        }
        for n in notes {
            let on = to_tick(n.onset_s);
            let off = if is_drum {
                on
            } else {
                to_tick(n.offset_s).max(on + 1)
            };
            events.push((on, 2, [0x90 | channel, n.pitch, WRITE_VELOCITY]));
            // drum offs at the onset tick must follow their note-on
            let off_rank = if is_drum { 3 } else { 0 };
            events.push((off, off_rank, [0x80 | channel, n.pitch, 64]));
        }
        push_chunk(&mut out, b"MTrk", &encode_track(events, end_tick));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_note_file() -> Vec<u8> {
        // format 0, one track, 480 ppq, 500000 us/qn, program 0 on channel 1
        let mut track = vec![
            0x00, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20, 0x00, 0xc0, 0x00, 0x00, 0x90, 60, 80,
        ];
        track.extend_from_slice(&[0x83, 0x60, 0x80, 60, 0x40, 0x00, 0xff, 0x2f, 0x00]);
        let mut out = Vec::new();
        push_chunk(&mut out, b"MThd", &[0, 0, 0, 1, 0x01, 0xe0]);
        push_chunk(&mut out, b"MTrk", &track);
        out
    }

    #[test]
    fn one_note_file_parses_to_half_second_note() {
        let parsed = parse_smf(&one_note_file()).unwrap();
        assert_eq!(parsed.sequence.notes(), &[NoteEvent::new(0.0, 0.5, 60, 0)]);
        assert_eq!(parsed.warnings, SmfWarnings::default());
    }

    #[test]
    fn one_note_round_trip_is_exact() {
        let seq = parse_smf(&one_note_file()).unwrap().sequence;
        let back = parse_smf(&write_smf(&seq, 480)).unwrap().sequence;
        assert_eq!(back, seq);
    }

    #[test]
    fn velocity_zero_closes_the_note() {
        let mut track = vec![0x00, 0x90, 60, 80, 0x60, 0x90, 60, 0x00];
        track.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);
        let mut out = Vec::new();
        push_chunk(&mut out, b"MThd", &[0, 0, 0, 1, 0, 96]);
        push_chunk(&mut out, b"MTrk", &track);
        let parsed = parse_smf(&out).unwrap();
        assert_eq!(parsed.sequence.len(), 1);
        assert_eq!(parsed.warnings.dangling_notes, 0);
    }

    #[test]
    fn empty_track_gives_empty_sequence() {
        let mut out = Vec::new();
        push_chunk(&mut out, b"MThd", &[0, 0, 0, 1, 0, 96]);
        push_chunk(&mut out, b"MTrk", &[0x00, 0xff, 0x2f, 0x00]);
        let parsed = parse_smf(&out).unwrap();
        assert!(parsed.sequence.is_empty());
        assert_eq!(parsed.sequence.duration_s(), 0.0);
    }

    #[test]
    fn dangling_note_closes_at_end_of_track() {
        // running status on the second note-on
        let track = [
            0x00, 0x90, 60, 80, 0x60, 62, 80, 0x60, 0x80, 62, 0, 0x81, 0x40, 0xff, 0x2f, 0x00,
        ];
        let mut out = Vec::new();
        push_chunk(&mut out, b"MThd", &[0, 0, 0, 1, 0, 96]);
        push_chunk(&mut out, b"MTrk", &track);
        let parsed = parse_smf(&out).unwrap();
        assert_eq!(parsed.warnings.dangling_notes, 1);
        let n60 = parsed
            .sequence
            .notes()
            .iter()
            .find(|n| n.pitch == 60)
            .unwrap();
        // end of track at tick 96 + 96 + 192 = 384 ticks = 2 s at 96 ppq / 120 bpm
        assert!((n60.offset_s - 2.0).abs() < 1e-12);
    }

    #[test]
    fn overlapping_same_pitch_pairs_fifo() {
        let track = [
            0x00, 0x90, 60, 80, // on A @0
            0x60, 0x90, 60, 90, // on B @96
            0x60, 0x80, 60, 0, // off @192 closes A
            0x60, 0x80, 60, 0, // off @288 closes B
            0x00, 0xff, 0x2f, 0x00,
        ];
        let mut out = Vec::new();
        push_chunk(&mut out, b"MThd", &[0, 0, 0, 1, 0, 96]);
        push_chunk(&mut out, b"MTrk", &track);
        let notes = parse_smf(&out).unwrap().sequence.into_notes();
        assert_eq!(notes.len(), 2);
        assert!((notes[0].offset_s - 1.0).abs() < 1e-12);
        assert!((notes[1].onset_s - 0.5).abs() < 1e-12);
        assert!((notes[1].offset_s - 1.5).abs() < 1e-12);
    }

    #[test]
    fn channel_ten_is_onset_only_drums() {
        let track = [
            0x00, 0x99, 36, 100, 0x30, 0x89, 36, 0, 0x00, 0xff, 0x2f, 0x00,
        ];
        let mut out = Vec::new();
        push_chunk(&mut out, b"MThd", &[0, 0, 0, 1, 0, 96]);
        push_chunk(&mut out, b"MTrk", &track);
        let notes = parse_smf(&out).unwrap().sequence.into_notes();
        assert_eq!(notes, vec![NoteEvent::drum(0.0, 36)]);
    }

    #[test]
    fn tempo_change_mid_file() {
        // 96 ppq; 120 bpm for 96 ticks (0.5 s) then 60 bpm
        let track = [
            0x00, 0x90, 60, 80, //
            0x60, 0xff, 0x51, 0x03, 0x0f, 0x42, 0x40, // 1_000_000 us/qn @96
            0x60, 0x80, 60, 0, // off @192
            0x00, 0xff, 0x2f, 0x00,
        ];
        let mut out = Vec::new();
        push_chunk(&mut out, b"MThd", &[0, 0, 0, 1, 0, 96]);
        push_chunk(&mut out, b"MTrk", &track);
        let notes = parse_smf(&out).unwrap().sequence.into_notes();
        assert!((notes[0].offset_s - 1.5).abs() < 1e-12);
    }

    #[test]
    fn truncated_header_reports_offset() {
        let err = parse_smf(b"MThd\x00\x00\x00\x06\x00").unwrap_err();
        assert_eq!(err.kind, SmfErrorKind::UnexpectedEof);
        assert_eq!(err.offset, 8);
        assert_eq!(
            parse_smf(b"RIFF").unwrap_err().kind,
            SmfErrorKind::MissingHeader
        );
    }

    #[test]
    fn writer_emits_one_track_per_instrument() {
        let seq = NoteSequence::from_notes(vec![
            NoteEvent::new(0.0, 1.0, 60, 0),
            NoteEvent::new(0.5, 1.0, 40, 32),
            NoteEvent::new(1.0, 1.5, 62, 0),
        ]);
        let bytes = write_smf(&seq, 480);
        // tempo track + 2 note tracks
        assert_eq!(u16::from_be_bytes([bytes[10], bytes[11]]), 3);
        let empty = write_smf(&NoteSequence::empty(), 480);
        assert_eq!(u16::from_be_bytes([empty[10], empty[11]]), 1);
        assert!(parse_smf(&empty).unwrap().sequence.is_empty());
    }
}
