use std::collections::BTreeMap;

use super::grammar::{NoteKey, Structured, TimeBlock};
use super::token::{TokenSeq, DRUM_TOKEN_PROGRAM};
use super::SegmentWindow;
use crate::notes::NoteSequence;

/// Encodes the part of `seq` visible in `window` as a canonical token sequence of
/// at most `max_tokens` tokens (EOS included).
///
/// Notes sounding across the window start go to the tie section. An onset or
/// offset inside `[start, end)` becomes an event in its 10 ms bin. A melodic note
/// whose offset rounds onto its own onset bin is closed one bin later, or left
/// sounding if that bin falls outside the window.
pub fn encode_segment(
    seq: &NoteSequence,
    window: SegmentWindow,
    time_bins: u32,
    max_tokens: usize,
) -> TokenSeq {
    let mut tie: Vec<NoteKey> = Vec::new();
    let mut events: BTreeMap<u16, (Vec<NoteKey>, Vec<NoteKey>)> = BTreeMap::new();
    for note in seq.notes() {
        if note.is_drum {
            if window.contains(note.onset_s) {
                let bin = window.bin_of(note.onset_s, time_bins);
                events
                    .entry(bin)
                    .or_default()
                    .1
                    .push((DRUM_TOKEN_PROGRAM, note.pitch));
            }
            continue;
        }
        let key = (note.program, note.pitch);
        let on_bin = if note.onset_s < window.start_s {
            if note.offset_s <= window.start_s {
                continue;
            }
            tie.push(key);
            None
        } else if window.contains(note.onset_s) {
            let bin = window.bin_of(note.onset_s, time_bins);
            events.entry(bin).or_default().1.push(key);
            Some(bin)
        } else {
            continue;
        };
        if window.contains(note.offset_s) {
            let mut off = window.bin_of(note.offset_s, time_bins);
            if let Some(on) = on_bin {
                if off <= on {
                    if u32::from(on) + 1 >= time_bins {
                        continue;
                    }
                    off = on + 1;
                }
            }
            events.entry(off).or_default().0.push(key);
        }
    }
    tie.sort_unstable();
    let blocks = events
        .into_iter()
        .map(|(bin, (mut offs, mut ons))| {
            offs.sort_unstable();
            ons.sort_unstable();
            TimeBlock { bin, offs, ons }
        })
        .collect();
    let mut s = Structured {
        sos: false,
        tie,
        blocks,
        eos: true,
        trailing_pad: 0,
    };
    if s.token_len() > max_tokens {
        s.truncate_to(max_tokens);
    }
    s.to_tokens()
}
