use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand_chacha::ChaCha8Rng;

use super::layers::{feed_forward_eval, layer_norm_eval, linear};
use super::network::{cross_keys, decoder_forward, encoder_forward, memory_forward, positions};
use super::params::{Attention, Params};
use super::{ModelConfig, ModelError};
use crate::audio::{AudioBuffer, MODEL_SAMPLE_RATE};
use crate::codec::{TrackDecoder, Violations, Vocab};
use crate::notes::NoteSequence;
use crate::segment::{window_grid, SegmentConfig};
use crate::spectral::{LogMel, FRAME_HOP_S};

const NO_RNG: Option<&mut ChaCha8Rng> = None;

/// Encoder states `[N_f x d]` in evaluation mode.
pub fn encode_frames(
    p: &Params,
    cfg: &ModelConfig,
    frames: &ArrayView2<f32>,
    valid_frames: usize,
) -> Result<Array2<f64>, ModelError> {
    Ok(encoder_forward(p, cfg, frames, valid_frames, NO_RNG)?.0)
}

/// Memory rows `[l_agg x d]` for a PAD-padded prior, or `None` without a memory path.
pub fn embed_memory(
    p: &Params,
    cfg: &ModelConfig,
    prior: &[u32],
) -> Result<Option<Array2<f64>>, ModelError> {
    Ok(memory_forward(p, cfg, prior)?.map(|m| m.0))
}

/// Number of cross-attention keys the decoder sees.
pub fn cross_key_len(cfg: &ModelConfig, enc: &Array2<f64>, mem: Option<&Array2<f64>>) -> usize {
    cross_keys(cfg, enc, mem, cfg.frames_per_window).0.nrows()
}

/// Teacher-forced logits `[len x vocab]`.
pub fn decode_logits(
    p: &Params,
    cfg: &ModelConfig,
    target_in: &[u32],
    enc: &Array2<f64>,
    mem: Option<&Array2<f64>>,
    valid_frames: usize,
) -> Result<Array2<f64>, ModelError> {
    let (kv, mask) = cross_keys(cfg, enc, mem, valid_frames);
    Ok(decoder_forward(p, cfg, target_in, &kv, &mask, NO_RNG)?.0)
}

/// Single-query multi-head attention over cached keys and values.
fn attend_row(
    a: &Attention,
    heads: usize,
    q: &Array1<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    mask: Option<&[bool]>,
) -> Array1<f64> {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut o = Array1::zeros(d);
    let mut w = vec![0.0; k.nrows()];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        let qh = q.slice(s![r.clone()]);
        let mut max = f64::NEG_INFINITY;
        for (j, wj) in w.iter_mut().enumerate() {
            if mask.is_none_or(|m| m[j]) {
                *wj = qh.dot(&k.slice(s![j, r.clone()])) * scale;
                max = max.max(*wj);
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for (j, wj) in w.iter_mut().enumerate() {
            *wj = if mask.is_none_or(|m| m[j]) {
                (*wj - max).exp()
            } else {
                0.0
            };
            sum += *wj;
        }
        let mut oh = o.slice_mut(s![r.clone()]);
        for (j, &wj) in w.iter().enumerate() {
            if wj != 0.0 {
                oh.scaled_add(wj / sum, &v.slice(s![j, r.clone()]));
            }
        }
    }
    let o2 = o.insert_axis(ndarray::Axis(0));
    linear(&a.o, &o2.view()).row(0).to_owned()
}

fn row_linear(l: &super::params::Linear, x: &Array1<f64>) -> Array1<f64> {
    x.dot(&l.w) + l.b.row(0)
}

fn row_ln(ln: &super::params::LayerNorm, x: &Array1<f64>) -> Array1<f64> {
    layer_norm_eval(ln, &x.clone().insert_axis(ndarray::Axis(0)))
        .row(0)
        .to_owned()
}

fn argmax(row: ArrayView1<f64>) -> u32 {
    row.iter()
        .enumerate()
        .fold(0, |b, (j, &v)| if v > row[b] { j } else { b }) as u32
}

/// Greedy decoding with cached keys and values. Returns the generated ids
/// (without SOS), ending with EOS unless `N_t` tokens were produced first.
pub fn greedy_decode(
    p: &Params,
    cfg: &ModelConfig,
    enc: &Array2<f64>,
    mem: Option<&Array2<f64>>,
    valid_frames: usize,
) -> Result<Vec<u32>, ModelError> {
    let (kv, mask) = cross_keys(cfg, enc, mem, valid_frames);
    let cross: Vec<(Array2<f64>, Array2<f64>)> = p
        .decoder
        .iter()
        .map(|l| (kv.dot(&l.cross_attn.k), linear(&l.cross_attn.v, &kv.view())))
        .collect();
    let d = cfg.d_model;
    let n = cfg.max_tokens;
    let mut self_k: Vec<Array2<f64>> = p.decoder.iter().map(|_| Array2::zeros((n, d))).collect();
    let mut self_v = self_k.clone();
    let pos = positions(n, d);
    let mut out = Vec::new();
    let mut tok = Vocab::SOS;
    for t in 0..n {
        let mut x = p.token_table.row(tok as usize).to_owned() + pos.row(t);
        for (li, l) in p.decoder.iter().enumerate() {
            let h = row_ln(&l.ln1, &x);
            self_k[li].row_mut(t).assign(&h.dot(&l.self_attn.k));
            self_v[li]
                .row_mut(t)
                .assign(&row_linear(&l.self_attn.v, &h));
            let q = row_linear(&l.self_attn.q, &h);
            x += &attend_row(
                &l.self_attn,
                cfg.attn_heads,
                &q,
                self_k[li].slice(s![..=t, ..]),
                self_v[li].slice(s![..=t, ..]),
                None,
            );
            let h = row_ln(&l.ln2, &x);
            let q = row_linear(&l.cross_attn.q, &h);
            x += &attend_row(
                &l.cross_attn,
                cfg.attn_heads,
                &q,
                cross[li].0.view(),
                cross[li].1.view(),
                Some(&mask),
            );
            let h = row_ln(&l.ln3, &x).insert_axis(ndarray::Axis(0));
            x += &feed_forward_eval(&l.ff, &h).row(0);
        }
        let h = row_ln(&p.decoder_ln, &x);
        let logits = row_linear(&p.out, &h);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("logits"));
        }
        tok = argmax(logits.view());
        out.push(tok);
        if tok == Vocab::EOS {
            break;
        }
    }
    Ok(out)
}

/// Predicted ids of one window as the next window's prior: truncated or PAD-padded to `N_t`.
pub fn prior_from_prediction(pred: &[u32], max_tokens: usize) -> Vec<u32> {
    let mut v: Vec<u32> = pred.iter().copied().take(max_tokens).collect();
    v.resize(max_tokens, Vocab::PAD);
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcription {
    pub notes: NoteSequence,
    pub violations: Violations,
    /// Generated ids per window.
    pub windows: Vec<Vec<u32>>,
}

/// Windows are decoded in order; each window's memory comes from the previous
/// window's prediction and window 0 starts from an all-PAD prior.
pub fn transcribe_track(
    p: &Params,
    cfg: &ModelConfig,
    seg: &SegmentConfig,
    audio: &AudioBuffer,
) -> Result<Transcription, ModelError> {
    let vocab = seg.vocab();
    if vocab.size() != cfg.vocab_size
        || seg.frames_per_window != cfg.frames_per_window
        || seg.max_tokens != cfg.max_tokens
    {
        return Err(ModelError::Config(
            "segment geometry does not match the model".into(),
        ));
    }
    let audio = if audio.sample_rate == MODEL_SAMPLE_RATE {
        audio.clone()
    } else {
        audio.resampled(MODEL_SAMPLE_RATE)
    };
    let frames = LogMel::new()
        .compute(&audio)
        .map_err(|e| ModelError::Config(e.to_string()))?;
    let nf = cfg.frames_per_window;
    let total = frames.nrows();
    let mut decoder = TrackDecoder::new();
    let mut prior = vec![Vocab::PAD; cfg.max_tokens];
    let mut windows = Vec::new();
    for i in window_grid(total, nf) {
        let valid = nf.min(total - i);
        let mut win = Array2::<f32>::zeros((nf, cfg.input_dim));
        win.slice_mut(s![..valid, ..])
            .assign(&frames.slice(s![i..i + valid, ..]));
        let enc = encode_frames(p, cfg, &win.view(), valid)?;
        let mem = embed_memory(p, cfg, &prior)?;
        let pred = greedy_decode(p, cfg, &enc, mem.as_ref(), valid)?;
        let tokens = vocab
            .decode_ids(&pred)
            .expect("model ids lie inside the vocabulary");
        let start = i as f64 * FRAME_HOP_S;
        decoder.push(
            &tokens,
            crate::codec::SegmentWindow::new(start, (i + valid) as f64 * FRAME_HOP_S),
        );
        prior = prior_from_prediction(&pred, cfg.max_tokens);
        windows.push(pred);
    }
    let (notes, violations) = decoder.finish(audio.duration_s());
    Ok(Transcription {
        notes,
        violations,
        windows,
    })
}
