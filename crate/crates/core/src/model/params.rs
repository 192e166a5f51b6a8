use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;

/// `x W + b` with `b` stored as a `1 x n` row.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl Linear {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            w: Array2::zeros((n_in, n_out)),
            b: Array2::zeros((1, n_out)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
}

impl LayerNorm {
    fn zeros(d: usize) -> Self {
        Self {
            gamma: Array2::zeros((1, d)),
            beta: Array2::zeros((1, d)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    /// Key projection without bias: a key bias only shifts each score row by a
    /// constant, which softmax ignores.
    pub k: Array2<f64>,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    fn zeros(d: usize) -> Self {
        Self {
            q: Linear::zeros(d, d),
            k: Array2::zeros((d, d)),
            v: Linear::zeros(d, d),
            o: Linear::zeros(d, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub cross_attn: Attention,
    pub ln3: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryParams {
    /// `None` when the decoder token embedding is shared.
    pub table: Option<Array2<f64>>,
    pub attn: Attention,
    pub ln: LayerNorm,
}

/// All trainable tensors. Positional encodings are fixed sinusoids and not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub frame_proj: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_ln: LayerNorm,
    pub token_table: Array2<f64>,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_ln: LayerNorm,
    pub out: Linear,
    pub memory: Option<MemoryParams>,
}

/// Callback over `(name, tensor)` in a fixed order.
pub type TensorVisitor<'a> = dyn FnMut(&str, &Array2<f64>) + 'a;

macro_rules! visit_fns {
    ($refs:ident, $($mut_:tt)?) => {
        fn $refs<'a>(&'a $($mut_)? self, out: &mut Vec<(String, &'a $($mut_)? Array2<f64>)>) {
            let Params { frame_proj, encoder, encoder_ln, token_table, decoder, decoder_ln, out: proj, memory } = self;
            fn lin<'a>(p: &str, l: &'a $($mut_)? Linear, out: &mut Vec<(String, &'a $($mut_)? Array2<f64>)>) {
                let Linear { w, b } = l;
                out.push((format!("{p}.w"), w));
                out.push((format!("{p}.b"), b));
            }
            fn ln<'a>(p: &str, l: &'a $($mut_)? LayerNorm, out: &mut Vec<(String, &'a $($mut_)? Array2<f64>)>) {
                let LayerNorm { gamma, beta } = l;
                out.push((format!("{p}.gamma"), gamma));
                out.push((format!("{p}.beta"), beta));
            }
            fn attn<'a>(p: &str, a: &'a $($mut_)? Attention, out: &mut Vec<(String, &'a $($mut_)? Array2<f64>)>) {
                let Attention { q, k, v, o } = a;
                lin(&format!("{p}.q"), q, out);
                out.push((format!("{p}.k.w"), k));
                lin(&format!("{p}.v"), v, out);
                lin(&format!("{p}.o"), o, out);
            }
            fn ff<'a>(p: &str, f: &'a $($mut_)? FeedForward, out: &mut Vec<(String, &'a $($mut_)? Array2<f64>)>) {
                let FeedForward { l1, l2 } = f;
                lin(&format!("{p}.l1"), l1, out);
                lin(&format!("{p}.l2"), l2, out);
            }
            lin("frame_proj", frame_proj, out);
            for (i, l) in encoder.into_iter().enumerate() {
                let EncoderLayer { ln1, attn: a, ln2, ff: f } = l;
                ln(&format!("enc.{i}.ln1"), ln1, out);
                attn(&format!("enc.{i}.attn"), a, out);
                ln(&format!("enc.{i}.ln2"), ln2, out);
                ff(&format!("enc.{i}.ff"), f, out);
            }
            ln("enc.ln", encoder_ln, out);
            out.push(("token.table".to_string(), token_table));
            for (i, l) in decoder.into_iter().enumerate() {
                let DecoderLayer { ln1, self_attn, ln2, cross_attn, ln3, ff: f } = l;
                ln(&format!("dec.{i}.ln1"), ln1, out);
                attn(&format!("dec.{i}.self"), self_attn, out);
                ln(&format!("dec.{i}.ln2"), ln2, out);
                attn(&format!("dec.{i}.cross"), cross_attn, out);
                ln(&format!("dec.{i}.ln3"), ln3, out);
                ff(&format!("dec.{i}.ff"), f, out);
            }
            ln("dec.ln", decoder_ln, out);
            lin("out", proj, out);
            if let Some(MemoryParams { table, attn: a, ln: l }) = memory {
                if let Some(t) = table {
                    out.push(("mem.table".to_string(), t));
                }
                attn("mem.attn", a, out);
                ln("mem.ln", l, out);
            }
        }
    };
}

impl Params {
    /// Zero-filled tensors with the shapes `cfg` implies.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let ff = || FeedForward {
            l1: Linear::zeros(d, cfg.ff_dim),
            l2: Linear::zeros(cfg.ff_dim, d),
        };
        Self {
            frame_proj: Linear::zeros(cfg.input_dim, d),
            encoder: (0..cfg.encoder_layers)
                .map(|_| EncoderLayer {
                    ln1: LayerNorm::zeros(d),
                    attn: Attention::zeros(d),
                    ln2: LayerNorm::zeros(d),
                    ff: ff(),
                })
                .collect(),
            encoder_ln: LayerNorm::zeros(d),
            token_table: Array2::zeros((cfg.vocab_size, d)),
            decoder: (0..cfg.decoder_layers)
                .map(|_| DecoderLayer {
                    ln1: LayerNorm::zeros(d),
                    self_attn: Attention::zeros(d),
                    ln2: LayerNorm::zeros(d),
                    cross_attn: Attention::zeros(d),
                    ln3: LayerNorm::zeros(d),
                    ff: ff(),
                })
                .collect(),
            decoder_ln: LayerNorm::zeros(d),
            out: Linear::zeros(d, cfg.vocab_size),
            memory: cfg.has_memory().then(|| MemoryParams {
                table: (!cfg.share_memory_embedding).then(|| Array2::zeros((cfg.vocab_size, d))),
                attn: Attention::zeros(d),
                ln: LayerNorm::zeros(d),
            }),
        }
    }

    /// Random initialisation. Every tensor draws from its own stream keyed by
    /// `(seed, name)`, so adding or removing the memory path leaves the other
    /// tensors unchanged.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(cfg);
        for (name, t) in p.tensors_mut() {
            init_tensor(&name, t, seed);
        }
        p
    }

    visit_fns!(collect_refs,);
    visit_fns!(collect_refs_mut, mut);

    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut v = Vec::new();
        self.collect_refs(&mut v);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut v = Vec::new();
        self.collect_refs_mut(&mut v);
        v
    }

    pub fn visit(&self, f: &mut TensorVisitor<'_>) {
        for (n, t) in self.tensors() {
            f(&n, t);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn fill(&mut self, v: f64) {
        for (_, t) in self.tensors_mut() {
            t.fill(v);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Embedding table used for prior tokens.
    pub fn memory_table(&self) -> &Array2<f64> {
        match &self.memory {
            Some(MemoryParams { table: Some(t), .. }) => t,
            _ => &self.token_table,
        }
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the run seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn init_tensor(name: &str, t: &mut Array2<f64>, seed: u64) {
    let std = if name.ends_with(".gamma") {
        t.fill(1.0);
        return;
    } else if name.ends_with(".beta") || name.ends_with(".b") {
        t.fill(0.0);
        return;
    } else if name == "out.w" {
        // small logits so the untrained model predicts close to uniformly
        0.01
    } else if name.ends_with(".table") {
        0.5
    } else {
        1.0 / (t.nrows() as f64).sqrt()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
    let normal = Normal::new(0.0, std).expect("positive std");
    t.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_stable() {
        let cfg = ModelConfig::default();
        let p = Params::init(&cfg, 1);
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert!(names.contains(&"mem.table".to_string()));
        assert!(names.contains(&"enc.1.ff.l2.w".to_string()));
        let mut q = Params::zeros(&cfg);
        assert_eq!(q.tensors_mut().len(), names.len());
    }

    #[test]
    fn memory_params_do_not_perturb_the_rest() {
        let with = Params::init(&ModelConfig::default(), 5);
        let without = Params::init(
            &ModelConfig {
                l_agg: 0,
                ..ModelConfig::default()
            },
            5,
        );
        assert!(without.memory.is_none());
        assert_eq!(with.encoder, without.encoder);
        assert_eq!(with.out, without.out);
        assert_eq!(with.token_table, without.token_table);
    }

    #[test]
    fn shared_embedding_drops_the_table() {
        let p = Params::init(
            &ModelConfig {
                share_memory_embedding: true,
                ..ModelConfig::default()
            },
            0,
        );
        assert!(p.memory.as_ref().unwrap().table.is_none());
        assert_eq!(p.memory_table(), &p.token_table);
    }
}
