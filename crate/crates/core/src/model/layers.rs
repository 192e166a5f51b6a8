use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::params::{Attention, FeedForward, LayerNorm, Linear};

const LN_EPS: f64 = 1e-5;

/// Fixed sinusoidal table `[n x d]`: even columns sine, odd columns cosine.
pub fn sinusoidal_positions(n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |(pos, i)| {
        let freq = 1.0 / 10_000f64.powf((i / 2 * 2) as f64 / d as f64);
        let a = pos as f64 * freq;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

pub fn linear(l: &Linear, x: &ArrayView2<f64>) -> Array2<f64> {
    let mut y = Array2::zeros((x.nrows(), l.w.ncols()));
    y.assign(&l.b.row(0));
    general_mat_mul(1.0, x, &l.w, 1.0, &mut y);
    y
}

/// Accumulates parameter gradients into `g` and returns `dL/dx` when requested.
pub fn linear_backward(
    l: &Linear,
    x: &ArrayView2<f64>,
    dy: &Array2<f64>,
    g: &mut Linear,
    want_dx: bool,
) -> Option<Array2<f64>> {
    general_mat_mul(1.0, &x.t(), dy, 1.0, &mut g.w);
    g.b.row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    want_dx.then(|| dy.dot(&l.w.t()))
}

pub struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub fn layer_norm(ln: &LayerNorm, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * *is);
    }
    let y = &xhat * &ln.gamma + &ln.beta;
    (y, LnCache { xhat, inv_std })
}

pub fn layer_norm_eval(ln: &LayerNorm, x: &Array2<f64>) -> Array2<f64> {
    layer_norm(ln, x).0
}

pub fn layer_norm_backward(
    ln: &LayerNorm,
    c: &LnCache,
    dy: &Array2<f64>,
    g: &mut LayerNorm,
) -> Array2<f64> {
    g.gamma
        .row_mut(0)
        .scaled_add(1.0, &(dy * &c.xhat).sum_axis(Axis(0)));
    g.beta.row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    let d = dy.ncols() as f64;
    let mut dx = dy * &ln.gamma;
    for ((mut row, xh), &is) in dx
        .rows_mut()
        .into_iter()
        .zip(c.xhat.rows())
        .zip(c.inv_std.iter())
    {
        let m1 = row.sum() / d;
        let m2 = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|r, &h| *r = is * (*r - m1 - h * m2));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub struct FfCache {
    x: Array2<f64>,
    z: Array2<f64>,
    u: Array2<f64>,
}

pub fn feed_forward(f: &FeedForward, x: Array2<f64>) -> (Array2<f64>, FfCache) {
    let z = linear(&f.l1, &x.view());
    let u = z.mapv(gelu);
    let y = linear(&f.l2, &u.view());
    (y, FfCache { x, z, u })
}

pub fn feed_forward_eval(f: &FeedForward, x: &Array2<f64>) -> Array2<f64> {
    linear(&f.l2, &linear(&f.l1, &x.view()).mapv(gelu).view())
}

pub fn feed_forward_backward(
    f: &FeedForward,
    c: &FfCache,
    dy: &Array2<f64>,
    g: &mut FeedForward,
) -> Array2<f64> {
    let du = linear_backward(&f.l2, &c.u.view(), dy, &mut g.l2, true).unwrap();
    let dz = du * &c.z.mapv(gelu_grad);
    linear_backward(&f.l1, &c.x.view(), &dz, &mut g.l1, true).unwrap()
}

/// Which keys each query may attend to.
#[derive(Clone, Copy)]
pub struct AttnMask<'a> {
    /// Per-key validity; `None` admits all keys.
    pub keys: Option<&'a [bool]>,
    /// Query `i` sees keys `0..=i + causal_offset` when set.
    pub causal_offset: Option<usize>,
}

impl AttnMask<'_> {
    pub const NONE: AttnMask<'static> = AttnMask {
        keys: None,
        causal_offset: None,
    };
}

/// Row-wise masked softmax of `scores` in place; fully masked rows become zero.
fn masked_softmax(scores: &mut Array2<f64>, mask: &AttnMask<'_>) {
    let n = scores.ncols();
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let row = row.as_slice_mut().expect("score rows are contiguous");
        let lim = mask.causal_offset.map_or(n, |o| (i + o + 1).min(n));
        let (live, dead) = row.split_at_mut(lim);
        dead.fill(0.0);
        let mut max = f64::NEG_INFINITY;
        match mask.keys {
            Some(keys) => {
                for (v, &k) in live.iter_mut().zip(keys) {
                    if k {
                        max = max.max(*v);
                    } else {
                        *v = f64::NEG_INFINITY;
                    }
                }
            }
            None => max = live.iter().fold(max, |m, &v| m.max(v)),
        }
        if max == f64::NEG_INFINITY {
            live.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for v in live.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        live.iter_mut().for_each(|v| *v *= inv);
    }
}

pub struct AttnCache {
    xq: Array2<f64>,
    xkv: Option<Array2<f64>>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
}

/// Multi-head attention of `xq` over `xkv` (`None` for self-attention).
pub fn attention(
    a: &Attention,
    heads: usize,
    xq: Array2<f64>,
    xkv: Option<Array2<f64>>,
    mask: &AttnMask<'_>,
) -> (Array2<f64>, AttnCache) {
    let kv_src = xkv.as_ref().unwrap_or(&xq);
    let q = linear(&a.q, &xq.view());
    let k = kv_src.dot(&a.k);
    let v = linear(&a.v, &kv_src.view());
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut o = Array2::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t());
        sc.mapv_inplace(|x| x * scale);
        masked_softmax(&mut sc, mask);
        general_mat_mul(1.0, &sc, &v.slice(cols), 0.0, &mut o.slice_mut(cols));
        probs.push(sc);
    }
    let y = linear(&a.o, &o.view());
    (
        y,
        AttnCache {
            xq,
            xkv,
            q,
            k,
            v,
            probs,
            o,
        },
    )
}

/// Returns `(dL/dxq, dL/dxkv)`; for self-attention the second is folded into the first.
pub fn attention_backward(
    a: &Attention,
    heads: usize,
    c: &AttnCache,
    dy: &Array2<f64>,
    g: &mut Attention,
) -> (Array2<f64>, Option<Array2<f64>>) {
    let dout = linear_backward(&a.o, &c.o.view(), dy, &mut g.o, true).unwrap();
    let d = c.q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for (h, p) in c.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let doh = dout.slice(cols);
        general_mat_mul(1.0, &p.t(), &doh, 0.0, &mut dv.slice_mut(cols));
        let mut ds = doh.dot(&c.v.slice(cols).t());
        for (mut dr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot: f64 = dr.iter().zip(pr.iter()).map(|(a, b)| a * b).sum();
            Zip::from(&mut dr)
                .and(&pr)
                .for_each(|x, &pv| *x = pv * (*x - dot) * scale);
        }
        general_mat_mul(1.0, &ds, &c.k.slice(cols), 0.0, &mut dq.slice_mut(cols));
        general_mat_mul(1.0, &ds.t(), &c.q.slice(cols), 0.0, &mut dk.slice_mut(cols));
    }
    let kv_src = c.xkv.as_ref().unwrap_or(&c.xq);
    let mut dxq = linear_backward(&a.q, &c.xq.view(), &dq, &mut g.q, true).unwrap();
    general_mat_mul(1.0, &kv_src.t(), &dk, 1.0, &mut g.k);
    let dxk = dk.dot(&a.k.t());
    let dxv = linear_backward(&a.v, &kv_src.view(), &dv, &mut g.v, true).unwrap();
    let dkv = dxk + dxv;
    if c.xkv.is_some() {
        (dxq, Some(dkv))
    } else {
        dxq += &dkv;
        (dxq, None)
    }
}

/// Inverted dropout mask, or `None` when inactive.
pub fn dropout_mask<R: Rng + ?Sized>(
    shape: (usize, usize),
    p: f64,
    rng: Option<&mut R>,
) -> Option<Array2<f64>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    }))
}

pub fn apply_mask(x: Array2<f64>, m: &Option<Array2<f64>>) -> Array2<f64> {
    match m {
        Some(m) => x * m,
        None => x,
    }
}
