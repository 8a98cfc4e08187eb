//! Flat binary checkpoints.
//!
//! Layout: the magic `MTLSEG1\n`, then per parameter a little-endian `u32`
//! name length, the UTF-8 name, a `u32` rank, `rank` `u32` extents and the
//! raw `f32` data. The model configuration travels as small parameters
//! under the `config.` prefix so a checkpoint alone can rebuild its model.

use std::fs;
use std::path::Path;

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MTLSEG1\n";
const CONFIG_PREFIX: &str = "config.";

pub fn encode(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + store.numel() * 4 + store.len() * 64);
    out.extend_from_slice(MAGIC);
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Sequential reader that reports byte offsets on failure.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ParamStore<f32>> {
    let mut cur = Cursor {
        buf: bytes,
        pos: 0,
        path,
    };
    if cur.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::format(path, 0, "bad magic"));
    }
    let mut store = ParamStore::new();
    while cur.pos < bytes.len() {
        let at = cur.pos;
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::format(path, at + 4, "name is not UTF-8"))?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(
                path,
                cur.pos - 4,
                format!("implausible rank {rank}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = cur.u32("extent")? as usize;
            if d == 0 {
                return Err(Error::format(path, cur.pos - 4, "zero extent"));
            }
            shape.push(d);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= bytes.len() / 4)
            .ok_or_else(|| Error::format(path, cur.pos, format!("shape {shape:?} exceeds file")))?;
        let raw = cur.take(n * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(&shape, data)?;
        store
            .insert(&name, t)
            .map_err(|_| Error::format(path, at, format!("duplicate parameter {name}")))?;
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

fn config_entries(cfg: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
    let e = &cfg.encoder;
    let d = &cfg.decoder;
    vec![
        ("encoder.embed_dims", e.embed_dims.to_vec()),
        ("encoder.depths", e.depths.to_vec()),
        ("encoder.heads", e.heads.to_vec()),
        ("encoder.reductions", e.reductions.to_vec()),
        ("encoder.mlp_ratio", vec![e.mlp_ratio]),
        (
            "decoder",
            vec![
                d.channels,
                d.tasks,
                d.heads,
                d.cross_reduction,
                d.cross_attention as usize,
                d.mlp_ratio,
            ],
        ),
    ]
}

/// Model weights plus the configuration entries.
pub fn model_store(cfg: &ModelConfig, weights: &ParamStore<f32>) -> Result<ParamStore<f32>> {
    let mut out = ParamStore::new();
    for (key, vals) in config_entries(cfg) {
        let data = vals.iter().map(|&v| v as f32).collect();
        out.insert(
            &format!("{CONFIG_PREFIX}{key}"),
            Tensor::new(&[vals.len()], data)?,
        )?;
    }
    for (name, t) in weights.iter() {
        out.insert(name, t.clone())?;
    }
    Ok(out)
}

pub fn save_model(path: &Path, cfg: &ModelConfig, weights: &ParamStore<f32>) -> Result<()> {
    save(path, &model_store(cfg, weights)?)
}

fn read_ints(store: &ParamStore<f32>, key: &str, n: usize) -> Result<Vec<usize>> {
    let name = format!("{CONFIG_PREFIX}{key}");
    let t = store
        .by_name(&name)
        .ok_or_else(|| Error::Params(format!("checkpoint lacks {name}")))?;
    if t.len() != n {
        return Err(Error::Params(format!(
            "{name} has {} values, expected {n}",
            t.len()
        )));
    }
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < 1e7 {
                Ok(v as usize)
            } else {
                Err(Error::Params(format!("{name} holds non-integer {v}")))
            }
        })
        .collect()
}

fn arr4(v: Vec<usize>) -> [usize; 4] {
    [v[0], v[1], v[2], v[3]]
}

pub fn config_from_store(store: &ParamStore<f32>) -> Result<ModelConfig> {
    let encoder = EncoderConfig {
        embed_dims: arr4(read_ints(store, "encoder.embed_dims", 4)?),
        depths: arr4(read_ints(store, "encoder.depths", 4)?),
        heads: arr4(read_ints(store, "encoder.heads", 4)?),
        reductions: arr4(read_ints(store, "encoder.reductions", 4)?),
        mlp_ratio: read_ints(store, "encoder.mlp_ratio", 1)?[0],
    };
    let d = read_ints(store, "decoder", 6)?;
    let decoder = DecoderConfig {
        channels: d[0],
        tasks: d[1],
        heads: d[2],
        cross_reduction: d[3],
        cross_attention: match d[4] {
            0 => false,
            1 => true,
            v => return Err(Error::Params(format!("cross_attention flag {v}"))),
        },
        mlp_ratio: d[5],
    };
    let cfg = ModelConfig { encoder, decoder };
    cfg.validate()?;
    Ok(cfg)
}

/// Rebuilds the model a checkpoint was written from.
pub fn load_model(path: &Path) -> Result<(Model, ParamStore<f32>)> {
    let all = load(path)?;
    let cfg = config_from_store(&all)?;
    let (model, mut weights) = Model::build::<f32>(&cfg, 0)?;
    let mut saved = ParamStore::new();
    for (name, t) in all.iter().filter(|(n, _)| !n.starts_with(CONFIG_PREFIX)) {
        saved.insert(name, t.clone())?;
    }
    weights
        .assign_from(&saved)
        .map_err(|e| Error::Params(format!("{}: {e}", path.display())))?;
    Ok((model, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::new(&[2], vec![1.5, -2.0]).unwrap())
            .unwrap();
        s.insert("b.w", Tensor::new(&[1, 2, 1], vec![0.25, 3.0]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn byte_layout() {
        let b = encode(&tiny());
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(b[12], b'a');
        assert_eq!(&b[13..17], &1u32.to_le_bytes());
        assert_eq!(&b[17..21], &2u32.to_le_bytes());
        assert_eq!(&b[21..25], &1.5f32.to_le_bytes());
        assert_eq!(b.len(), 8 + (4 + 1 + 4 + 4 + 8) + (4 + 3 + 4 + 12 + 8));
    }

    #[test]
    fn round_trip() {
        let s = tiny();
        let back = decode(&encode(&s), Path::new("mem")).unwrap();
        assert_eq!(back.names(), s.names());
        assert_eq!(back.tensors(), s.tensors());
    }

    #[test]
    fn truncation_reports_offset() {
        let b = encode(&tiny());
        let err = decode(&b[..b.len() - 3], Path::new("x.ckpt")).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 8 + 21 + 4 + 3 + 4 + 12),
            e => panic!("{e}"),
        }
        assert!(decode(b"MTLSEG2\n", Path::new("x")).is_err());
    }

    #[test]
    fn config_survives() {
        let mut cfg = ModelConfig::desk(3);
        cfg.decoder.cross_attention = false;
        let (_, w) = Model::build::<f32>(&cfg, 1).unwrap();
        let s = model_store(&cfg, &w).unwrap();
        assert_eq!(config_from_store(&s).unwrap(), cfg);
    }
}
