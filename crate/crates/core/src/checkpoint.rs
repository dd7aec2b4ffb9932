//! Flat binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "XEMBCKPT"
//! version    u32       currently 1
//! config     8 x u32   vocab_size, model_dim, n_layers, n_heads,
//!                      n_embedder_layers, max_window, ffn_dim, reserved(0)
//! rope_base  f64
//! n_tensors  u32
//! per tensor:
//!   name_len u32, name utf-8 bytes,
//!   ndim     u32, dims u32 x ndim,
//!   data     f32 x prod(dims), little-endian
//! ```
//!
//! Tensors are written in sorted name order, so the same parameters always
//! produce byte-identical files.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"XEMBCKPT";
const VERSION: u32 = 1;

pub fn to_bytes(cfg: &ModelConfig, params: &ParamSet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.vocab_size,
        cfg.model_dim,
        cfg.n_layers,
        cfg.n_heads,
        cfg.n_embedder_layers,
        cfg.max_window,
        cfg.ffn(),
        0,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.rope_base.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8], tag: &str, trainable: bool) -> Result<(ModelConfig, ParamSet<f32>)> {
    let mut r = Reader { buf: bytes, at: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header: Vec<usize> = (0..8).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let rope_base = r.f64()?;
    let cfg = ModelConfig {
        vocab_size: header[0],
        model_dim: header[1],
        n_layers: header[2],
        n_heads: header[3],
        n_embedder_layers: header[4],
        max_window: header[5],
        rope_base,
        ffn_dim: Some(header[6]),
    };
    let n_tensors = r.u32()? as usize;
    let mut params = ParamSet::new(tag);
    for _ in 0..n_tensors {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("non-utf8 tensor name".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(name, Tensor::new(shape, data)?, trainable)?;
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!(
            "trailing bytes in checkpoint ({} unread)",
            bytes.len() - r.at
        )));
    }
    Ok((cfg, params))
}

pub fn save(path: &Path, cfg: &ModelConfig, params: &ParamSet<f32>) -> Result<()> {
    let bytes = to_bytes(cfg, params);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path, tag: &str, trainable: bool) -> Result<(ModelConfig, ParamSet<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes, tag, trainable)
}

/// Hex SHA-256 of the serialized checkpoint; used for frozen-parameter
/// assertions and run manifests.
pub fn digest(cfg: &ModelConfig, params: &ParamSet<f32>) -> String {
    use sha2::{Digest, Sha256};
    let bytes = to_bytes(cfg, params);
    let hash = Sha256::digest(&bytes);
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
}
