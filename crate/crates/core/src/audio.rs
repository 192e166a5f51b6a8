//! Mono audio buffers, WAV I/O and a deterministic additive synthesizer.

use std::io::{Read, Seek, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::notes::NoteSequence;

/// Sample rate every model-facing buffer is converted to.
pub const MODEL_SAMPLE_RATE: u32 = 16_000;

const ATTACK_S: f64 = 0.010;
const RELEASE_S: f64 = 0.010;
const DRUM_BURST_S: f64 = 0.030;
const NOTE_GAIN: f64 = 0.5;

/// Relative partial amplitudes (fundamental first) per MIDI instrument class
/// (`program / 8`). The fundamental is always the strongest partial. Programs in
/// the same class share a timbre.
pub const OVERTONE_TABLE: [[f64; 6]; 16] = [
    [1.00, 0.55, 0.30, 0.18, 0.10, 0.05], // piano
    [1.00, 0.05, 0.60, 0.02, 0.30, 0.01], // chromatic percussion
    [1.00, 0.80, 0.70, 0.60, 0.50, 0.40], // organ
    [1.00, 0.70, 0.45, 0.30, 0.15, 0.08], // guitar
    [1.00, 0.90, 0.25, 0.10, 0.02, 0.00], // bass
    [1.00, 0.50, 0.45, 0.40, 0.35, 0.30], // strings
    [1.00, 0.35, 0.35, 0.20, 0.20, 0.10], // ensemble
    [1.00, 0.85, 0.75, 0.55, 0.40, 0.25], // brass
    [1.00, 0.10, 0.80, 0.05, 0.55, 0.03], // reed
    [1.00, 0.15, 0.05, 0.02, 0.00, 0.00], // pipe
    [1.00, 0.95, 0.90, 0.85, 0.80, 0.75], // synth lead
    [1.00, 0.30, 0.10, 0.30, 0.10, 0.30], // synth pad
    [1.00, 0.40, 0.00, 0.40, 0.00, 0.40], // synth effects
    [1.00, 0.65, 0.20, 0.45, 0.10, 0.25], // ethnic
    [1.00, 0.20, 0.90, 0.10, 0.70, 0.05], // percussive
    [1.00, 0.00, 0.50, 0.00, 0.25, 0.00], // sound effects
];

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("WAV error: {0}")]
    Wav(#[from] hound::Error),
    #[error("unsupported WAV sample format: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn silence(seconds: f64, sample_rate: u32) -> Self {
        let n = (seconds * f64::from(sample_rate)).ceil() as usize;
        Self::new(vec![0.0; n], sample_rate)
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Linear-interpolation resampling. Identity when the rate already matches.
    pub fn resampled(&self, rate: u32) -> AudioBuffer {
        if rate == self.sample_rate || self.samples.is_empty() {
            return AudioBuffer::new(self.samples.clone(), rate);
        }
        let ratio = f64::from(self.sample_rate) / f64::from(rate);
        let n = ((self.samples.len() as f64) / ratio).round().max(1.0) as usize;
        let last = self.samples.len() - 1;
        let samples = (0..n)
            .map(|i| {
                let pos = i as f64 * ratio;
                let j = (pos.floor() as usize).min(last);
                let frac = pos - j as f64;
                let a = f64::from(self.samples[j]);
                let b = f64::from(self.samples[(j + 1).min(last)]);
                (a + (b - a) * frac) as f32
            })
            .collect();
        AudioBuffer::new(samples, rate)
    }

    /// Writes 16-bit little-endian mono PCM.
    pub fn write_wav<W: Write + Seek>(&self, writer: W) -> Result<(), AudioError> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::new(writer, spec)?;
        for &s in &self.samples {
            let v = (f64::from(s).clamp(-1.0, 1.0) * 32767.0).round() as i16;
            w.write_sample(v)?;
        }
        w.finalize()?;
        Ok(())
    }

    /// Reads a PCM WAV (integer or float samples, any channel count; channels are
    /// averaged) and resamples it to 16 kHz.
    pub fn read_wav<R: Read>(reader: R) -> Result<AudioBuffer, AudioError> {
        let mut r = hound::WavReader::new(reader)?;
        let spec = r.spec();
        let raw: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Int => {
                if !(2..=32).contains(&spec.bits_per_sample) {
                    return Err(AudioError::Unsupported(format!(
                        "{} bits",
                        spec.bits_per_sample
                    )));
                }
                let scale = (1u64 << (spec.bits_per_sample - 1)) as f32;
                r.samples::<i32>()
                    .map(|s| s.map(|v| v as f32 / scale))
                    .collect::<Result<_, _>>()?
            }
            hound::SampleFormat::Float => r.samples::<f32>().collect::<Result<_, _>>()?,
        };
        let channels = usize::from(spec.channels.max(1));
        let mono = raw
            .chunks(channels)
            .map(|c| c.iter().sum::<f32>() / channels as f32)
            .collect();
        Ok(AudioBuffer::new(mono, spec.sample_rate).resampled(MODEL_SAMPLE_RATE))
    }
}

pub fn midi_to_hz(pitch: u8) -> f64 {
    440.0 * 2f64.powf((f64::from(pitch) - 69.0) / 12.0)
}

fn envelope(t: f64, duration: f64) -> f64 {
    (t / ATTACK_S)
        .min((duration - t) / RELEASE_S)
        .clamp(0.0, 1.0)
}

/// Renders notes as sums of sine partials weighted by [`OVERTONE_TABLE`] with 10 ms
/// linear attack and release; drums become 30 ms decaying noise bursts. The mix is
/// scaled by `1/sqrt(max polyphony)` and clipped to `[-1, 1]`. Output length covers
/// the sequence duration.
///
/// Drum noise is seeded from the note itself, so identical notes render identically
/// regardless of what else is in the sequence.
pub fn synthesize_additive(seq: &NoteSequence, sample_rate: u32) -> AudioBuffer {
    assert!(sample_rate >= 8000, "sample rate must be at least 8 kHz");
    let sr = f64::from(sample_rate);
    let len = (seq.duration_s() * sr).ceil() as usize;
    let mut mix = vec![0.0f64; len];
    let nyquist = sr / 2.0;
    for note in seq.notes() {
        let start = (note.onset_s * sr).round() as usize;
        if note.is_drum {
            let n = (DRUM_BURST_S * sr).round() as usize;
            let seed = (u64::from(note.pitch) << 48) ^ start as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..n {
                let Some(slot) = mix.get_mut(start + i) else {
                    break;
                };
                let decay = 1.0 - i as f64 / n as f64;
                *slot += NOTE_GAIN * decay * rng.random_range(-1.0..1.0);
            }
            continue;
        }
        let weights = &OVERTONE_TABLE[usize::from(note.program / 8)];
        let f0 = midi_to_hz(note.pitch);
        let total: f64 = weights
            .iter()
            .enumerate()
            .filter(|(k, _)| (*k as f64 + 1.0) * f0 < nyquist)
            .map(|(_, w)| w)
            .sum();
        let duration = note.offset_s - note.onset_s;
        let end = ((note.offset_s * sr).round() as usize).min(len);
        for (i, slot) in mix.iter_mut().enumerate().take(end).skip(start) {
            let t = (i - start) as f64 / sr;
            let env = envelope(t, duration);
            if env == 0.0 {
                continue;
            }
            let mut v = 0.0;
            for (k, w) in weights.iter().enumerate() {
                let f = f0 * (k as f64 + 1.0);
                if f >= nyquist || *w == 0.0 {
                    continue;
                }
                v += w * (std::f64::consts::TAU * f * t).sin();
            }
            *slot += NOTE_GAIN * env * v / total;
        }
    }
    let scale = 1.0 / (seq.max_polyphony().max(1) as f64).sqrt();
    let samples = mix
        .into_iter()
        .map(|v| (v * scale).clamp(-1.0, 1.0) as f32)
        .collect();
    AudioBuffer::new(samples, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::notes::NoteEvent;
    use rustfft::{num_complex::Complex, FftPlanner};

    #[test]
    fn a4_has_dominant_bin_at_440() {
        let seq = NoteSequence::from_notes(vec![NoteEvent::new(0.0, 1.0, 69, 0)]);
        let audio = synthesize_additive(&seq, 16_000);
        assert_eq!(audio.samples.len(), 16_000);
        let mut buf: Vec<Complex<f64>> = audio
            .samples
            .iter()
            .map(|&s| Complex::new(f64::from(s), 0.0))
            .collect();
        FftPlanner::new()
            .plan_fft_forward(buf.len())
            .process(&mut buf);
        let peak = (0..8000)
            .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
            .unwrap();
        // 1 s of audio gives 1 Hz bins
        assert_eq!(peak, 440);
    }

    #[test]
    fn fundamental_dominates_every_timbre() {
        for row in OVERTONE_TABLE {
            assert!(row[1..].iter().all(|&w| w < row[0]));
        }
    }

    #[test]
    fn empty_sequence_renders_silence() {
        let audio = synthesize_additive(&NoteSequence::new(vec![], 1.0), 16_000);
        assert_eq!(audio.samples.len(), 16_000);
        assert!(audio.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn simultaneous_notes_stay_in_range() {
        let seq = NoteSequence::from_notes(vec![
            NoteEvent::new(0.0, 0.5, 60, 16),
            NoteEvent::new(0.0, 0.5, 60, 80),
            NoteEvent::drum(0.1, 38),
        ]);
        let audio = synthesize_additive(&seq, 16_000);
        assert!(audio.samples.iter().all(|s| s.abs() <= 1.0));
    }

    #[test]
    fn drums_render_identically_in_any_context() {
        let alone = synthesize_additive(
            &NoteSequence::new(vec![NoteEvent::drum(0.2, 36)], 0.5),
            16_000,
        );
        let again = synthesize_additive(
            &NoteSequence::new(vec![NoteEvent::drum(0.2, 36)], 0.5),
            16_000,
        );
        assert_eq!(alone, again);
        assert!(alone.samples.iter().any(|&s| s != 0.0));
    }

    #[test]
    fn wav_round_trip_and_resample() {
        let audio = AudioBuffer::new(vec![0.0, 0.5, -0.5, 0.25], 16_000);
        let mut bytes = std::io::Cursor::new(Vec::new());
        audio.write_wav(&mut bytes).unwrap();
        let back = AudioBuffer::read_wav(std::io::Cursor::new(bytes.into_inner())).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        for (a, b) in audio.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1.0 / 32767.0);
        }

        let slow = AudioBuffer::new(vec![0.0, 1.0, 0.0, -1.0], 8_000);
        let up = slow.resampled(16_000);
        assert_eq!(up.samples.len(), 8);
        assert_eq!(up.samples[1], 0.5);
    }
}
