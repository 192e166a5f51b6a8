use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use super::CodecError;

/// Width of one `TIME` bin in seconds.
pub const TIME_STEP_S: f64 = 0.010;
/// Program number reserved for drums inside the token language.
pub const DRUM_TOKEN_PROGRAM: u8 = 128;

const SPECIAL: u32 = 4;
const PROGRAMS: u32 = 129;
const PITCHES: u32 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Pad,
    Sos,
    Eos,
    Tie,
    Time(u16),
    /// 0..=127 melodic programs, 128 drums.
    Program(u8),
    NoteOn,
    NoteOff,
    Pitch(u8),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Pad => f.write_str("PAD"),
            Token::Sos => f.write_str("SOS"),
            Token::Eos => f.write_str("EOS"),
            Token::Tie => f.write_str("TIE"),
            Token::Time(t) => write!(f, "T{t}"),
            Token::Program(p) => write!(f, "P{p}"),
            Token::NoteOn => f.write_str("ON"),
            Token::NoteOff => f.write_str("OFF"),
            Token::Pitch(n) => write!(f, "N{n}"),
        }
    }
}

impl FromStr for Token {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CodecError::BadTokenText(s.to_string());
        let num = |rest: &str| -> Result<u32, CodecError> {
            if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            rest.parse().map_err(|_| bad())
        };
        Ok(match s {
            "PAD" => Token::Pad,
            "SOS" => Token::Sos,
            "EOS" => Token::Eos,
            "TIE" => Token::Tie,
            "ON" => Token::NoteOn,
            "OFF" => Token::NoteOff,
            _ => match s.split_at(1) {
                ("T", rest) => Token::Time(u16::try_from(num(rest)?).map_err(|_| bad())?),
                ("P", rest) => match num(rest)? {
                    p @ 0..=128 => Token::Program(p as u8),
                    _ => return Err(bad()),
                },
                ("N", rest) => match num(rest)? {
                    n @ 0..=127 => Token::Pitch(n as u8),
                    _ => return Err(bad()),
                },
                _ => return Err(bad()),
            },
        })
    }
}

/// An ordered token list for one window.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq(Vec<Token>);

impl TokenSeq {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }

    pub fn into_vec(self) -> Vec<Token> {
        self.0
    }

    /// Space-separated text rendering, e.g. `TIE T10 P0 ON N60 EOS`.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.0.len() * 4);
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&t.to_string());
        }
        out
    }

    /// Parses one line of token text. Errors carry the 1-based column of the
    /// offending token.
    pub fn parse_text(line: &str) -> Result<Self, CodecError> {
        let mut tokens = Vec::new();
        let mut col = 0usize;
        for part in line.split(' ') {
            if !part.is_empty() {
                let token = part
                    .trim()
                    .parse::<Token>()
                    .map_err(|_| CodecError::TokenText {
                        column: col + 1,
                        text: part.to_string(),
                    })?;
                tokens.push(token);
            }
            col += part.len() + 1;
        }
        Ok(Self(tokens))
    }
}

impl Deref for TokenSeq {
    type Target = [Token];

    fn deref(&self) -> &[Token] {
        &self.0
    }
}

impl From<Vec<Token>> for TokenSeq {
    fn from(v: Vec<Token>) -> Self {
        Self(v)
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Contiguous id layout: `PAD=0, SOS=1, EOS=2, TIE=3`, then `time_bins` TIME ids,
/// 129 PROGRAM ids, `ON`, `OFF`, and 128 PITCH ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    time_bins: u32,
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const SOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const TIE: u32 = 3;

    pub fn new(time_bins: u32) -> Self {
        assert!(time_bins > 0, "at least one time bin");
        Self { time_bins }
    }

    /// Vocabulary whose time bins cover a window of `seconds`.
    pub fn for_window(seconds: f64) -> Self {
        Self::new(time_bins_for(seconds))
    }

    pub fn time_bins(&self) -> u32 {
        self.time_bins
    }

    pub fn size(&self) -> usize {
        (SPECIAL + self.time_bins + PROGRAMS + 2 + PITCHES) as usize
    }

    fn program_base(&self) -> u32 {
        SPECIAL + self.time_bins
    }

    pub fn note_on_id(&self) -> u32 {
        self.program_base() + PROGRAMS
    }

    fn pitch_base(&self) -> u32 {
        self.note_on_id() + 2
    }

    /// Id range of PROGRAM tokens.
    pub fn program_ids(&self) -> std::ops::Range<u32> {
        self.program_base()..self.program_base() + PROGRAMS
    }

    pub fn token_to_id(&self, t: Token) -> Result<u32, CodecError> {
        Ok(match t {
            Token::Pad => Self::PAD,
            Token::Sos => Self::SOS,
            Token::Eos => Self::EOS,
            Token::Tie => Self::TIE,
            Token::Time(b) if u32::from(b) < self.time_bins => SPECIAL + u32::from(b),
            Token::Program(p) if p <= DRUM_TOKEN_PROGRAM => self.program_base() + u32::from(p),
            Token::NoteOn => self.note_on_id(),
            Token::NoteOff => self.note_on_id() + 1,
            Token::Pitch(n) if n < 128 => self.pitch_base() + u32::from(n),
            other => return Err(CodecError::TokenOutOfRange(other)),
        })
    }

    pub fn id_to_token(&self, id: u32) -> Result<Token, CodecError> {
        let pb = self.program_base();
        let nb = self.pitch_base();
        Ok(match id {
            0 => Token::Pad,
            1 => Token::Sos,
            2 => Token::Eos,
            3 => Token::Tie,
            i if i < pb => Token::Time((i - SPECIAL) as u16),
            i if i < pb + PROGRAMS => Token::Program((i - pb) as u8),
            i if i == pb + PROGRAMS => Token::NoteOn,
            i if i == pb + PROGRAMS + 1 => Token::NoteOff,
            i if i < nb + PITCHES => Token::Pitch((i - nb) as u8),
            i => return Err(CodecError::IdOutOfRange(i)),
        })
    }

    pub fn encode_ids(&self, tokens: &[Token]) -> Result<Vec<u32>, CodecError> {
        tokens.iter().map(|&t| self.token_to_id(t)).collect()
    }

    /// Ids padded with PAD to exactly `len` (tokens beyond `len` are dropped).
    pub fn padded_ids(&self, tokens: &[Token], len: usize) -> Result<Vec<u32>, CodecError> {
        let mut ids = self.encode_ids(&tokens[..tokens.len().min(len)])?;
        ids.resize(len, Self::PAD);
        Ok(ids)
    }

    pub fn decode_ids(&self, ids: &[u32]) -> Result<TokenSeq, CodecError> {
        ids.iter()
            .map(|&i| self.id_to_token(i))
            .collect::<Result<Vec<_>, _>>()
            .map(TokenSeq)
    }
}

/// `ceil(seconds / 10 ms)`, robust to the representation error of decimal seconds.
pub fn time_bins_for(seconds: f64) -> u32 {
    ((seconds / TIME_STEP_S) - 1e-6).ceil().max(1.0) as u32
}
