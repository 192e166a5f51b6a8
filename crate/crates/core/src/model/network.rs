use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::layers::{
    apply_mask, attention, attention_backward, dropout_mask, feed_forward, feed_forward_backward,
    layer_norm, layer_norm_backward, linear, linear_backward, sinusoidal_positions, AttnCache,
    AttnMask, FfCache, LnCache,
};
use super::params::Params;
use super::{ModelConfig, ModelError};
use crate::codec::Vocab;
use crate::spectral::LOG_FLOOR;

/// Span of `ln(x + 1e-6)` between the floor and unit magnitude.
const INPUT_SCALE: f64 = 13.815_510_557_964_274;

type PositionCache = HashMap<(usize, usize), Rc<Array2<f64>>>;

thread_local! {
    static POSITIONS: RefCell<PositionCache> = RefCell::new(HashMap::new());
}

/// Cached sinusoid table with at least `n` rows.
pub(crate) fn positions(n: usize, d: usize) -> Rc<Array2<f64>> {
    let n = n.next_power_of_two().max(16);
    POSITIONS.with(|c| {
        c.borrow_mut()
            .entry((n, d))
            .or_insert_with(|| Rc::new(sinusoidal_positions(n, d)))
            .clone()
    })
}

/// One training or evaluation example.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub frames: ArrayView2<'a, f32>,
    pub valid_frames: usize,
    /// Prior token ids, exactly `N_t` long.
    pub prior: &'a [u32],
    /// Target token ids, PAD-padded.
    pub target: &'a [u32],
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    /// Summed cross-entropy over non-PAD target positions.
    pub loss_sum: f64,
    pub tokens: usize,
    /// Positions whose argmax equals the target.
    pub correct: usize,
}

impl std::ops::AddAssign for LossStats {
    fn add_assign(&mut self, o: Self) {
        self.loss_sum += o.loss_sum;
        self.tokens += o.tokens;
        self.correct += o.correct;
    }
}

impl LossStats {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.tokens.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.tokens.max(1) as f64
    }
}

/// Scaled log-mel input; rows past `valid` are zero.
pub(crate) fn normalize_frames(
    frames: &ArrayView2<f32>,
    valid: usize,
) -> Result<Array2<f64>, ModelError> {
    let floor = LOG_FLOOR.ln();
    let mut x = Array2::zeros(frames.raw_dim());
    for (mut out, inp) in x.rows_mut().into_iter().zip(frames.rows()).take(valid) {
        for (o, &v) in out.iter_mut().zip(inp.iter()) {
            if !v.is_finite() {
                return Err(ModelError::NonFinite("input frames"));
            }
            *o = (f64::from(v) - floor) / INPUT_SCALE;
        }
    }
    Ok(x)
}

pub(crate) fn frame_mask(cfg: &ModelConfig, valid: usize) -> Vec<bool> {
    (0..cfg.frames_per_window).map(|i| i < valid).collect()
}

fn gather(table: &Array2<f64>, ids: impl Iterator<Item = (usize, u32)>, d: usize) -> Array2<f64> {
    let rows: Vec<(usize, u32)> = ids.collect();
    let pos = positions(rows.iter().map(|r| r.0 + 1).max().unwrap_or(1), d);
    let mut x = Array2::zeros((rows.len(), d));
    for (mut out, &(p, id)) in x.rows_mut().into_iter().zip(&rows) {
        out.assign(&table.row(id as usize));
        out += &pos.row(p);
    }
    x
}

fn scatter_rows(table: &mut Array2<f64>, ids: impl Iterator<Item = u32>, dx: &Array2<f64>) {
    for (id, row) in ids.zip(dx.rows()) {
        table.row_mut(id as usize).scaled_add(1.0, &row);
    }
}

fn check_ids(ids: &[u32], vocab: usize) -> Result<(), ModelError> {
    match ids.iter().find(|&&t| t as usize >= vocab) {
        Some(&t) => Err(ModelError::TokenId(t)),
        None => Ok(()),
    }
}

struct Drop2 {
    a: Option<Array2<f64>>,
    b: Option<Array2<f64>>,
}

pub(crate) struct EncoderCache {
    x_in: Array2<f64>,
    layers: Vec<(LnCache, AttnCache, LnCache, FfCache, Drop2)>,
    ln: LnCache,
}

pub(crate) fn encoder_forward<R: Rng + ?Sized>(
    p: &Params,
    cfg: &ModelConfig,
    frames: &ArrayView2<f32>,
    valid: usize,
    mut rng: Option<&mut R>,
) -> Result<(Array2<f64>, EncoderCache), ModelError> {
    if frames.dim() != (cfg.frames_per_window, cfg.input_dim) {
        return Err(ModelError::Length {
            what: "frame rows",
            expected: cfg.frames_per_window,
            got: frames.nrows(),
        });
    }
    let x_in = normalize_frames(frames, valid)?;
    let mask = frame_mask(cfg, valid);
    let amask = AttnMask {
        keys: Some(&mask),
        causal_offset: None,
    };
    let mut x = linear(&p.frame_proj, &x_in.view());
    x += &positions(cfg.frames_per_window, cfg.d_model).slice(s![..cfg.frames_per_window, ..]);
    let mut layers = Vec::with_capacity(p.encoder.len());
    for l in &p.encoder {
        let (h, c1) = layer_norm(&l.ln1, &x);
        let (a, ca) = attention(&l.attn, cfg.attn_heads, h, None, &amask);
        let da = dropout_mask(a.dim(), cfg.dropout, rng.as_deref_mut());
        x += &apply_mask(a, &da);
        let (h, c2) = layer_norm(&l.ln2, &x);
        let (f, cf) = feed_forward(&l.ff, h);
        let df = dropout_mask(f.dim(), cfg.dropout, rng.as_deref_mut());
        x += &apply_mask(f, &df);
        layers.push((c1, ca, c2, cf, Drop2 { a: da, b: df }));
    }
    let (y, ln) = layer_norm(&p.encoder_ln, &x);
    Ok((y, EncoderCache { x_in, layers, ln }))
}

fn encoder_backward(
    p: &Params,
    cfg: &ModelConfig,
    c: &EncoderCache,
    dy: &Array2<f64>,
    g: &mut Params,
) {
    let mut dx = layer_norm_backward(&p.encoder_ln, &c.ln, dy, &mut g.encoder_ln);
    for (i, (c1, ca, c2, cf, dr)) in c.layers.iter().enumerate().rev() {
        let (l, gl) = (&p.encoder[i], &mut g.encoder[i]);
        let df = apply_mask(dx.clone(), &dr.b);
        let dh = feed_forward_backward(&l.ff, cf, &df, &mut gl.ff);
        dx += &layer_norm_backward(&l.ln2, c2, &dh, &mut gl.ln2);
        let da = apply_mask(dx.clone(), &dr.a);
        let (dh, _) = attention_backward(&l.attn, cfg.attn_heads, ca, &da, &mut gl.attn);
        dx += &layer_norm_backward(&l.ln1, c1, &dh, &mut gl.ln1);
    }
    linear_backward(&p.frame_proj, &c.x_in.view(), &dx, &mut g.frame_proj, false);
}

pub(crate) struct MemoryCache {
    key_pos: Vec<usize>,
    attn: AttnCache,
    ln: LnCache,
}

/// `[l_agg x d]` memory rows, or `None` when the memory path is disabled.
pub(crate) fn memory_forward(
    p: &Params,
    cfg: &ModelConfig,
    prior: &[u32],
) -> Result<Option<(Array2<f64>, MemoryCache)>, ModelError> {
    let Some(mem) = &p.memory else {
        return Ok(None);
    };
    if prior.len() != cfg.max_tokens {
        return Err(ModelError::Length {
            what: "prior tokens",
            expected: cfg.max_tokens,
            got: prior.len(),
        });
    }
    check_ids(prior, cfg.vocab_size)?;
    let table = p.memory_table();
    let d = cfg.d_model;
    let xq = gather(table, prior.iter().copied().enumerate().take(cfg.l_agg), d);
    // PAD keys are masked out, so only non-PAD positions need key and value rows
    let key_pos: Vec<usize> = (0..prior.len())
        .filter(|&i| prior[i] != Vocab::PAD)
        .collect();
    let xkv = gather(table, key_pos.iter().map(|&i| (i, prior[i])), d);
    let (a, attn) = attention(
        &mem.attn,
        cfg.memory_heads,
        xq.clone(),
        Some(xkv),
        &AttnMask::NONE,
    );
    let (y, ln) = layer_norm(&mem.ln, &(xq + a));
    Ok(Some((y, MemoryCache { key_pos, attn, ln })))
}

fn memory_backward(
    p: &Params,
    cfg: &ModelConfig,
    prior: &[u32],
    c: &MemoryCache,
    dy: &Array2<f64>,
    g: &mut Params,
) {
    let (mem, gm) = (p.memory.as_ref().unwrap(), g.memory.as_mut().unwrap());
    let ds = layer_norm_backward(&mem.ln, &c.ln, dy, &mut gm.ln);
    let (dq, dkv) = attention_backward(&mem.attn, cfg.memory_heads, &c.attn, &ds, &mut gm.attn);
    let dq = dq + &ds;
    let dkv = dkv.unwrap();
    let table = match gm.table.as_mut() {
        Some(t) => t,
        None => &mut g.token_table,
    };
    scatter_rows(table, prior.iter().copied().take(cfg.l_agg), &dq);
    scatter_rows(table, c.key_pos.iter().map(|&i| prior[i]), &dkv);
}

/// Cross-attention keys: encoder states followed by memory rows.
pub(crate) fn cross_keys(
    cfg: &ModelConfig,
    enc: &Array2<f64>,
    mem: Option<&Array2<f64>>,
    valid: usize,
) -> (Array2<f64>, Vec<bool>) {
    let mut mask = frame_mask(cfg, valid);
    let kv = match mem {
        Some(m) => {
            mask.extend(std::iter::repeat_n(true, m.nrows()));
            concatenate(Axis(0), &[enc.view(), m.view()]).expect("matching widths")
        }
        None => enc.clone(),
    };
    (kv, mask)
}

struct DecLayerCache {
    c1: LnCache,
    sa: AttnCache,
    c2: LnCache,
    ca: AttnCache,
    c3: LnCache,
    cf: FfCache,
    drops: [Option<Array2<f64>>; 3],
}

pub(crate) struct DecoderCache {
    ids: Vec<u32>,
    layers: Vec<DecLayerCache>,
    ln: LnCache,
    h: Array2<f64>,
}

/// Logits for decoder input `ids` attending to `kv`.
pub(crate) fn decoder_forward<R: Rng + ?Sized>(
    p: &Params,
    cfg: &ModelConfig,
    ids: &[u32],
    kv: &Array2<f64>,
    kv_mask: &[bool],
    mut rng: Option<&mut R>,
) -> Result<(Array2<f64>, DecoderCache), ModelError> {
    if ids.len() > cfg.max_tokens {
        return Err(ModelError::Length {
            what: "decoder tokens at most",
            expected: cfg.max_tokens,
            got: ids.len(),
        });
    }
    check_ids(ids, cfg.vocab_size)?;
    let mut x = gather(&p.token_table, ids.iter().copied().enumerate(), cfg.d_model);
    let causal = AttnMask {
        keys: None,
        causal_offset: Some(0),
    };
    let cross = AttnMask {
        keys: Some(kv_mask),
        causal_offset: None,
    };
    let mut layers = Vec::with_capacity(p.decoder.len());
    for l in &p.decoder {
        let (h, c1) = layer_norm(&l.ln1, &x);
        let (a, sa) = attention(&l.self_attn, cfg.attn_heads, h, None, &causal);
        let d0 = dropout_mask(a.dim(), cfg.dropout, rng.as_deref_mut());
        x += &apply_mask(a, &d0);
        let (h, c2) = layer_norm(&l.ln2, &x);
        let (a, ca) = attention(&l.cross_attn, cfg.attn_heads, h, Some(kv.clone()), &cross);
        let d1 = dropout_mask(a.dim(), cfg.dropout, rng.as_deref_mut());
        x += &apply_mask(a, &d1);
        let (h, c3) = layer_norm(&l.ln3, &x);
        let (f, cf) = feed_forward(&l.ff, h);
        let d2 = dropout_mask(f.dim(), cfg.dropout, rng.as_deref_mut());
        x += &apply_mask(f, &d2);
        layers.push(DecLayerCache {
            c1,
            sa,
            c2,
            ca,
            c3,
            cf,
            drops: [d0, d1, d2],
        });
    }
    let (h, ln) = layer_norm(&p.decoder_ln, &x);
    let logits = linear(&p.out, &h.view());
    Ok((
        logits,
        DecoderCache {
            ids: ids.to_vec(),
            layers,
            ln,
            h,
        },
    ))
}

/// Returns the gradient with respect to the cross-attention keys.
fn decoder_backward(
    p: &Params,
    cfg: &ModelConfig,
    c: &DecoderCache,
    dlogits: &Array2<f64>,
    kv_rows: usize,
    g: &mut Params,
) -> Array2<f64> {
    let dh = linear_backward(&p.out, &c.h.view(), dlogits, &mut g.out, true).unwrap();
    let mut dx = layer_norm_backward(&p.decoder_ln, &c.ln, &dh, &mut g.decoder_ln);
    let mut dkv = Array2::zeros((kv_rows, cfg.d_model));
    for (i, lc) in c.layers.iter().enumerate().rev() {
        let (l, gl) = (&p.decoder[i], &mut g.decoder[i]);
        let df = apply_mask(dx.clone(), &lc.drops[2]);
        let dh = feed_forward_backward(&l.ff, &lc.cf, &df, &mut gl.ff);
        dx += &layer_norm_backward(&l.ln3, &lc.c3, &dh, &mut gl.ln3);
        let da = apply_mask(dx.clone(), &lc.drops[1]);
        let (dh, dk) = attention_backward(
            &l.cross_attn,
            cfg.attn_heads,
            &lc.ca,
            &da,
            &mut gl.cross_attn,
        );
        dkv += &dk.unwrap();
        dx += &layer_norm_backward(&l.ln2, &lc.c2, &dh, &mut gl.ln2);
        let da = apply_mask(dx.clone(), &lc.drops[0]);
        let (dh, _) =
            attention_backward(&l.self_attn, cfg.attn_heads, &lc.sa, &da, &mut gl.self_attn);
        dx += &layer_norm_backward(&l.ln1, &lc.c1, &dh, &mut gl.ln1);
    }
    scatter_rows(&mut g.token_table, c.ids.iter().copied(), &dx);
    dkv
}

/// Length of `target` without trailing PAD.
pub(crate) fn trimmed_len(target: &[u32]) -> usize {
    target
        .iter()
        .rposition(|&t| t != Vocab::PAD)
        .map_or(0, |i| i + 1)
}

/// `[SOS, target[..len-1]]`.
pub(crate) fn teacher_input(target: &[u32], len: usize) -> Vec<u32> {
    std::iter::once(Vocab::SOS)
        .chain(target[..len.saturating_sub(1)].iter().copied())
        .collect()
}

/// Cross-entropy over the non-PAD targets of one example. With `grads`, adds
/// `scale * dLoss/dParams` into it. `rng` enables dropout.
pub fn example_loss<R: Rng + ?Sized>(
    p: &Params,
    cfg: &ModelConfig,
    ex: &Example<'_>,
    scale: f64,
    grads: Option<&mut Params>,
    mut rng: Option<&mut R>,
) -> Result<LossStats, ModelError> {
    check_ids(ex.target, cfg.vocab_size)?;
    let len = trimmed_len(ex.target);
    if len == 0 {
        return Ok(LossStats::default());
    }
    let (enc, enc_cache) =
        encoder_forward(p, cfg, &ex.frames, ex.valid_frames, rng.as_deref_mut())?;
    let mem = memory_forward(p, cfg, ex.prior)?;
    let (kv, kv_mask) = cross_keys(cfg, &enc, mem.as_ref().map(|m| &m.0), ex.valid_frames);
    let ids = teacher_input(ex.target, len);
    let (logits, dec_cache) = decoder_forward(p, cfg, &ids, &kv, &kv_mask, rng)?;

    let mut stats = LossStats::default();
    let mut dlogits = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let t = ex.target[i] as usize;
        if t == Vocab::PAD as usize {
            continue;
        }
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        stats.loss_sum += lse - row[t];
        stats.tokens += 1;
        let arg = row
            .iter()
            .enumerate()
            .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
        stats.correct += usize::from(arg == t);
        let mut d = dlogits.row_mut(i);
        d.assign(&row.mapv(|v| (v - lse).exp() * scale));
        d[t] -= scale;
    }
    if !stats.loss_sum.is_finite() {
        return Err(ModelError::NonFinite("loss"));
    }
    if let Some(g) = grads {
        let dkv = decoder_backward(p, cfg, &dec_cache, &dlogits, kv.nrows(), g);
        let n_f = cfg.frames_per_window;
        if let Some((_, mc)) = &mem {
            memory_backward(
                p,
                cfg,
                ex.prior,
                mc,
                &dkv.slice(s![n_f.., ..]).to_owned(),
                g,
            );
        }
        encoder_backward(p, cfg, &enc_cache, &dkv.slice(s![..n_f, ..]).to_owned(), g);
    }
    Ok(stats)
}
