//! Strict structure of a well-formed window sequence, plus the order-only
//! transformations defined on it: canonical ordering and group shuffling.

use rand::seq::SliceRandom;
use rand::Rng;

use super::token::{Token, TokenSeq, DRUM_TOKEN_PROGRAM};
use super::CodecError;

/// A `(program, pitch)` key; program 128 is drums.
pub type NoteKey = (u8, u8);

/// Events sharing one TIME token. Note-offs always precede note-ons.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeBlock {
    pub bin: u16,
    pub offs: Vec<NoteKey>,
    pub ons: Vec<NoteKey>,
}

impl TimeBlock {
    fn token_len(&self) -> usize {
        1 + 3 * (self.offs.len() + self.ons.len())
    }
}

/// Parsed form of a grammar-valid sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Structured {
    pub sos: bool,
    pub tie: Vec<NoteKey>,
    pub blocks: Vec<TimeBlock>,
    pub eos: bool,
    pub trailing_pad: usize,
}

impl Structured {
    pub fn token_len(&self) -> usize {
        usize::from(self.sos)
            + 2 * self.tie.len()
            + 1
            + self.blocks.iter().map(TimeBlock::token_len).sum::<usize>()
            + usize::from(self.eos)
            + self.trailing_pad
    }

    pub fn to_tokens(&self) -> TokenSeq {
        let mut out = Vec::with_capacity(self.token_len());
        if self.sos {
            out.push(Token::Sos);
        }
        for &(p, n) in &self.tie {
            out.push(Token::Program(p));
            out.push(Token::Pitch(n));
        }
        out.push(Token::Tie);
        for block in &self.blocks {
            out.push(Token::Time(block.bin));
            for &(p, n) in &block.offs {
                out.extend([Token::Program(p), Token::NoteOff, Token::Pitch(n)]);
            }
            for &(p, n) in &block.ons {
                out.extend([Token::Program(p), Token::NoteOn, Token::Pitch(n)]);
            }
        }
        if self.eos {
            out.push(Token::Eos);
        }
        out.extend(std::iter::repeat_n(Token::Pad, self.trailing_pad));
        TokenSeq::new(out)
    }

    /// Drops whole event groups from the tail (then empty TIME tokens, then tie
    /// pairs) until the sequence, including EOS, fits in `max_len` tokens.
    pub fn truncate_to(&mut self, max_len: usize) {
        self.trailing_pad = 0;
        self.eos = true;
        while self.token_len() > max_len {
            if let Some(block) = self.blocks.last_mut() {
                if block.ons.pop().is_none() {
                    block.offs.pop();
                }
                if block.ons.is_empty() && block.offs.is_empty() {
                    self.blocks.pop();
                }
            } else if self.tie.pop().is_none() {
                break;
            }
        }
    }
}

fn violation(position: usize, reason: &'static str) -> CodecError {
    CodecError::Grammar { position, reason }
}

/// Parses a sequence under the strict grammar:
/// `SOS? (PROGRAM PITCH)* TIE (TIME (PROGRAM OFF PITCH)* (PROGRAM ON PITCH)*)* EOS? PAD*`
/// with strictly increasing TIME bins, at least one group per TIME, melodic programs
/// in the tie section, and no drum note-offs.
pub fn parse_structured(tokens: &[Token]) -> Result<Structured, CodecError> {
    let mut out = Structured::default();
    let mut i = 0usize;
    let at = |i: usize| tokens.get(i).copied();
    if at(0) == Some(Token::Sos) {
        out.sos = true;
        i = 1;
    }
    loop {
        match at(i) {
            Some(Token::Tie) => {
                i += 1;
                break;
            }
            Some(Token::Program(p)) => {
                if p == DRUM_TOKEN_PROGRAM {
                    return Err(violation(i, "drum program in tie section"));
                }
                match at(i + 1) {
                    Some(Token::Pitch(n)) => out.tie.push((p, n)),
                    _ => return Err(violation(i + 1, "tie program must be followed by a pitch")),
                }
                i += 2;
            }
            Some(_) => return Err(violation(i, "unexpected token in tie section")),
            None => return Err(violation(i, "missing TIE")),
        }
    }
    let mut last_bin: Option<u16> = None;
    while let Some(Token::Time(bin)) = at(i) {
        if last_bin.is_some_and(|b| bin <= b) {
            return Err(violation(i, "TIME bins must strictly increase"));
        }
        last_bin = Some(bin);
        i += 1;
        let mut block = TimeBlock {
            bin,
            offs: Vec::new(),
            ons: Vec::new(),
        };
        while let Some(Token::Program(p)) = at(i) {
            let (action, pitch) = (at(i + 1), at(i + 2));
            let Some(Token::Pitch(n)) = pitch else {
                return Err(violation(i + 2, "event group must end with a pitch"));
            };
            match action {
                Some(Token::NoteOff) => {
                    if p == DRUM_TOKEN_PROGRAM {
                        return Err(violation(i + 1, "drums have no note-off"));
                    }
                    if !block.ons.is_empty() {
                        return Err(violation(i, "note-off group after note-on section"));
                    }
                    block.offs.push((p, n));
                }
                Some(Token::NoteOn) => block.ons.push((p, n)),
                _ => return Err(violation(i + 1, "expected ON or OFF")),
            }
            i += 3;
        }
        if block.offs.is_empty() && block.ons.is_empty() {
            return Err(violation(i, "TIME without events"));
        }
        out.blocks.push(block);
    }
    if at(i) == Some(Token::Eos) {
        out.eos = true;
        i += 1;
    }
    while at(i) == Some(Token::Pad) {
        out.trailing_pad += 1;
        i += 1;
    }
    if i != tokens.len() {
        return Err(violation(i, "unexpected token"));
    }
    Ok(out)
}

pub fn validate(tokens: &[Token]) -> Result<(), CodecError> {
    parse_structured(tokens).map(|_| ())
}

/// Sorts tie pairs and each note-on/note-off section ascending by `(program, pitch)`.
/// Idempotent.
pub fn canonicalize(tokens: &[Token]) -> Result<TokenSeq, CodecError> {
    let mut s = parse_structured(tokens)?;
    s.tie.sort_unstable();
    for block in &mut s.blocks {
        block.offs.sort_unstable();
        block.ons.sort_unstable();
    }
    Ok(s.to_tokens())
}

/// Applies independent uniform permutations to the tie pairs and to every
/// (TIME, note-on/note-off section) group list. Decoding is unaffected.
pub fn shuffle_tokens<R: Rng + ?Sized>(
    tokens: &[Token],
    rng: &mut R,
) -> Result<TokenSeq, CodecError> {
    let mut s = parse_structured(tokens)?;
    s.tie.shuffle(rng);
    for block in &mut s.blocks {
        block.offs.shuffle(rng);
        block.ons.shuffle(rng);
    }
    Ok(s.to_tokens())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> TokenSeq {
        TokenSeq::parse_text(s).unwrap()
    }

    #[test]
    fn single_groups_are_left_alone() {
        let t = toks("P0 N60 TIE T10 P0 OFF N60 T20 P32 ON N40 EOS");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(shuffle_tokens(&t, &mut rng).unwrap(), t);
        }
    }

    #[test]
    fn two_group_shuffle_hits_both_orders_evenly() {
        // Oracle: the only permutations of a 2-element section are identity and swap.
        let input = toks("TIE T0 P0 ON N60 P32 ON N40 EOS");
        let swapped = toks("TIE T0 P32 ON N40 P0 ON N60 EOS");
        let mut counts = [0usize; 2];
        for seed in 0..2000u64 {
            let out = shuffle_tokens(&input, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            if out == input {
                counts[0] += 1;
            } else {
                assert_eq!(out, swapped);
                counts[1] += 1;
            }
        }
        // binomial(2000, 1/2): 4.5 standard deviations is about 100
        assert!(counts[0].abs_diff(1000) < 100, "{counts:?}");
        assert_eq!(canonicalize(&swapped).unwrap(), input);
    }

    #[test]
    fn sections_never_mix() {
        let t = toks(
            "P5 N1 P0 N2 TIE T3 P0 OFF N2 P1 OFF N7 P0 ON N9 P3 ON N1 P128 ON N36 EOS PAD PAD",
        );
        let canon = canonicalize(&t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let s = shuffle_tokens(&t, &mut rng).unwrap();
            assert_eq!(canonicalize(&s).unwrap(), canon);
            let parsed = parse_structured(&s).unwrap();
            assert_eq!(parsed.blocks[0].offs.len(), 2);
            assert_eq!(parsed.blocks[0].ons.len(), 3);
        }
        assert_eq!(canonicalize(&canon).unwrap(), canon);
    }

    #[test]
    fn rejects_malformed_sequences() {
        for bad in [
            "T1 P0 ON N60 EOS",  // no TIE
            "TIE P0 ON N60 EOS", // group before TIME
            "TIE T5 P0 ON N60 T5 P0 OFF N60 EOS",
            "TIE T1 EOS",              // empty time
            "TIE T1 P128 OFF N36 EOS", // drum off
            "TIE T1 P0 ON N60 P0 OFF N61 EOS",
            "P128 N36 TIE EOS",
            "TIE EOS T1",
            "TIE T1 P0 N60 EOS",
        ] {
            assert!(validate(&toks(bad)).is_err(), "{bad}");
        }
        assert!(validate(&toks("SOS TIE EOS PAD")).is_ok());
        assert!(validate(&toks("TIE")).is_ok());
    }

    #[test]
    fn truncation_keeps_grammar_and_eos() {
        let t = toks("P0 N50 TIE T1 P0 OFF N50 P0 ON N60 T3 P0 ON N62 P0 ON N64 EOS");
        for max in 2..=t.len() {
            let mut s = parse_structured(&t).unwrap();
            s.truncate_to(max);
            let out = s.to_tokens();
            assert!(out.len() <= max, "{max}: {out}");
            assert_eq!(out.last(), Some(&Token::Eos));
            validate(&out).unwrap();
        }
    }
}
