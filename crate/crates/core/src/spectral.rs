//! Log-mel spectrogram frontend.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::audio::{AudioBuffer, MODEL_SAMPLE_RATE};

pub const N_FFT: usize = 2048;
pub const HOP: usize = 128;
pub const N_MELS: usize = 512;
pub const MEL_FMIN_HZ: f64 = 20.0;
pub const MEL_FMAX_HZ: f64 = 7600.0;
pub const LOG_FLOOR: f64 = 1e-6;
/// Seconds between consecutive frames at 16 kHz.
pub const FRAME_HOP_S: f64 = HOP as f64 / MODEL_SAMPLE_RATE as f64;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("invalid mel range {fmin}..{fmax} Hz for sample rate {sample_rate}")]
    BadRange {
        fmin: f64,
        fmax: f64,
        sample_rate: u32,
    },
    #[error("need at least one mel band and an FFT of two or more samples")]
    BadSize,
    #[error("audio must be sampled at {MODEL_SAMPLE_RATE} Hz, got {0}")]
    SampleRate(u32),
}

/// Log-mel frames, one row per 8 ms hop.
pub type FrameMatrix = Array2<f32>;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters stored sparsely as (first FFT bin, weights).
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_bins: usize,
    filters: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    /// Builds `n_mels` filters evenly spaced on the mel scale over `[fmin, fmax]`.
    ///
    /// Each triangle is scaled by `2 / (right - left)` (unit area in Hz). A filter
    /// narrower than the FFT bin spacing that would catch no bin at all instead
    /// puts its weight on the bin nearest its center.
    pub fn new(
        n_fft: usize,
        n_mels: usize,
        fmin: f64,
        fmax: f64,
        sample_rate: u32,
    ) -> Result<Self, SpectralError> {
        if n_mels == 0 || n_fft < 2 {
            return Err(SpectralError::BadSize);
        }
        let nyquist = f64::from(sample_rate) / 2.0;
        if !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist) {
            return Err(SpectralError::BadRange {
                fmin,
                fmax,
                sample_rate,
            });
        }
        let n_bins = n_fft / 2 + 1;
        let bin_hz = f64::from(sample_rate) / n_fft as f64;
        let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut filters = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (right - left);
            let first = (left / bin_hz).floor() as usize;
            let last = ((right / bin_hz).ceil() as usize).min(n_bins - 1);
            let mut weights = Vec::new();
            let mut start = None;
            for k in first..=last {
                let f = k as f64 * bin_hz;
                let w = ((f - left) / (center - left)).min((right - f) / (right - center));
                if w > 0.0 {
                    start.get_or_insert(k);
                    weights.push(w * norm);
                } else if start.is_some() {
                    break;
                }
            }
            let start = match start {
                Some(s) => s,
                None => {
                    weights.push(norm);
                    ((center / bin_hz).round() as usize).min(n_bins - 1)
                }
            };
            filters.push((start, weights));
        }
        Ok(Self {
            n_bins,
            filters,
            centers_hz: edges[1..=n_mels].to_vec(),
        })
    }

    pub fn n_mels(&self) -> usize {
        self.filters.len()
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Dense `[n_mels x (n_fft/2 + 1)]` weight matrix.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.filters.len(), self.n_bins));
        for (m, (start, w)) in self.filters.iter().enumerate() {
            for (j, &v) in w.iter().enumerate() {
                out[[m, start + j]] = v;
            }
        }
        out
    }

    pub fn apply(&self, magnitude: &[f64], out: &mut [f64]) {
        for ((start, w), o) in self.filters.iter().zip(out.iter_mut()) {
            *o = w.iter().zip(&magnitude[*start..]).map(|(a, b)| a * b).sum();
        }
    }
}

pub fn mel_filterbank(
    n_fft: usize,
    n_mels: usize,
    fmin: f64,
    fmax: f64,
    sample_rate: u32,
) -> Result<MelFilterbank, SpectralError> {
    MelFilterbank::new(n_fft, n_mels, fmin, fmax, sample_rate)
}

/// Reflect-pad index mapping that also works when the pad exceeds the signal.
fn reflect(mut i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    i = i.rem_euclid(period);
    if i >= len as isize {
        i = period - i;
    }
    i as usize
}

/// Reusable STFT and mel state.
pub struct LogMel {
    bank: MelFilterbank,
    window: Vec<f64>,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl LogMel {
    pub fn new() -> Self {
        let bank = MelFilterbank::new(N_FFT, N_MELS, MEL_FMIN_HZ, MEL_FMAX_HZ, MODEL_SAMPLE_RATE)
            .expect("constant range is valid");
        let window = (0..N_FFT)
            .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / N_FFT as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        Self { bank, window, fft }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// `ceil(len / 128)` frames; frame `t` is centred on sample `128 t` with
    /// reflection padding at both ends.
    pub fn compute(&self, audio: &AudioBuffer) -> Result<FrameMatrix, SpectralError> {
        if audio.sample_rate != MODEL_SAMPLE_RATE {
            return Err(SpectralError::SampleRate(audio.sample_rate));
        }
        let x = &audio.samples;
        let n_frames = x.len().div_ceil(HOP);
        let mut out = Array2::<f32>::zeros((n_frames, N_MELS));
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut mag = vec![0.0; N_FFT / 2 + 1];
        let mut mel = vec![0.0; N_MELS];
        let half = (N_FFT / 2) as isize;
        for t in 0..n_frames {
            let centre = (t * HOP) as isize;
            for (n, slot) in buf.iter_mut().enumerate() {
                let idx = reflect(centre - half + n as isize, x.len());
                *slot = Complex::new(f64::from(x[idx]) * self.window[n], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, c) in mag.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            self.bank.apply(&mag, &mut mel);
            for (o, v) in out.row_mut(t).iter_mut().zip(&mel) {
                *o = (v + LOG_FLOOR).ln() as f32;
            }
        }
        Ok(out)
    }
}

impl Default for LogMel {
    fn default() -> Self {
        Self::new()
    }
}

/// Log-mel frames of 16 kHz audio: Hann-windowed 2048-point magnitude STFT, hop
/// 128, 512 mel bands over 20..7600 Hz, `ln(x + 1e-6)`.
pub fn log_mel(audio: &AudioBuffer) -> Result<FrameMatrix, SpectralError> {
    LogMel::new().compute(audio)
}
