//! Binary checkpoint: magic, JSON header, then named `f64` tensors with shapes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::optim::Adam;
use super::params::Params;
use super::ModelConfig;

const MAGIC: &[u8; 8] = b"TKSCKPT\x01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("invalid config in checkpoint: {0}")]
    Config(#[from] super::ModelError),
    #[error(
        "tensor mismatch: expected {expected} {expected_shape:?}, found {found} {found_shape:?}"
    )]
    Tensor {
        expected: String,
        expected_shape: (usize, usize),
        found: String,
        found_shape: (usize, usize),
    },
    #[error("tensor name is not UTF-8")]
    Name,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: Params,
    pub adam: Option<Adam>,
    /// Free-form run metadata (segment and training settings).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    adam_t: Option<u64>,
    meta: serde_json::Value,
}

fn write_group<W: Write>(w: &mut W, p: &Params) -> std::io::Result<()> {
    let ts = p.tensors();
    w.write_all(&(ts.len() as u32).to_le_bytes())?;
    for (name, t) in ts {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.nrows() as u32).to_le_bytes())?;
        w.write_all(&(t.ncols() as u32).to_le_bytes())?;
        for v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_group<R: Read>(r: &mut R, cfg: &ModelConfig) -> Result<Params, CheckpointError> {
    let mut p = Params::zeros(cfg);
    let count = read_u32(r)? as usize;
    let expected = p.tensors_mut();
    let n_expected = expected.len();
    let mut it = expected.into_iter();
    for _ in 0..count {
        let mut b2 = [0; 2];
        r.read_exact(&mut b2)?;
        let mut name = vec![0; u16::from_le_bytes(b2) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Name)?;
        let shape = (read_u32(r)? as usize, read_u32(r)? as usize);
        let Some((ename, t)) = it.next() else {
            return Err(CheckpointError::Tensor {
                expected: "<end>".into(),
                expected_shape: (0, 0),
                found: name,
                found_shape: shape,
            });
        };
        if ename != name || t.dim() != shape {
            return Err(CheckpointError::Tensor {
                expected_shape: t.dim(),
                expected: ename,
                found: name,
                found_shape: shape,
            });
        }
        let mut b8 = [0; 8];
        for v in t.iter_mut() {
            r.read_exact(&mut b8)?;
            *v = f64::from_le_bytes(b8);
        }
    }
    if let Some((ename, t)) = it.next() {
        return Err(CheckpointError::Tensor {
            expected_shape: t.dim(),
            expected: ename,
            found: format!("<{count} of {n_expected} tensors>"),
            found_shape: (0, 0),
        });
    }
    Ok(p)
}

pub fn write_checkpoint<W: Write>(mut w: W, c: &Checkpoint) -> Result<(), CheckpointError> {
    let header = serde_json::to_vec(&Header {
        config: c.config.clone(),
        step: c.step,
        adam_t: c.adam.as_ref().map(|a| a.t),
        meta: c.meta.clone(),
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    write_group(&mut w, &c.params)?;
    if let Some(a) = &c.adam {
        write_group(&mut w, &a.m)?;
        write_group(&mut w, &a.v)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint, checking every tensor name and shape against the stored config.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let mut header = vec![0; read_u32(&mut r)? as usize];
    r.read_exact(&mut header)?;
    let h: Header = serde_json::from_slice(&header)?;
    h.config.validate()?;
    let params = read_group(&mut r, &h.config)?;
    let adam = match h.adam_t {
        Some(t) => {
            let mut a = Adam::new(&h.config);
            a.m = read_group(&mut r, &h.config)?;
            a.v = read_group(&mut r, &h.config)?;
            a.t = t;
            Some(a)
        }
        None => None,
    };
    Ok(Checkpoint {
        config: h.config,
        step: h.step,
        params,
        adam,
        meta: h.meta,
    })
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<(), CheckpointError> {
    write_checkpoint(BufWriter::new(File::create(path)?), c)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gradcheck::tiny_config;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = tiny_config(true);
        let mut adam = Adam::new(&cfg);
        adam.t = 7;
        adam.m.fill(0.25);
        let c = Checkpoint {
            config: cfg.clone(),
            step: 42,
            params: Params::init(&cfg, 9),
            adam: Some(adam),
            meta: serde_json::json!({"note": "x"}),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &c).unwrap();
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), c);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = tiny_config(false);
        let c = Checkpoint {
            config: cfg.clone(),
            step: 0,
            params: Params::init(&cfg, 1),
            adam: None,
            meta: serde_json::Value::Null,
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &c).unwrap();
        // rewrite the header with a wider model; the stored tensors no longer fit
        let hlen = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let mut h: serde_json::Value = serde_json::from_slice(&buf[12..12 + hlen]).unwrap();
        h["config"]["ff_dim"] = 30.into();
        let h = serde_json::to_vec(&h).unwrap();
        let mut out = buf[..8].to_vec();
        out.extend((h.len() as u32).to_le_bytes());
        out.extend(h);
        out.extend(&buf[12 + hlen..]);
        assert!(matches!(
            read_checkpoint(&out[..]),
            Err(CheckpointError::Tensor { .. })
        ));
        assert!(matches!(
            read_checkpoint(&b"NOTACKPTxxxx"[..]),
            Err(CheckpointError::Magic)
        ));
    }
}
