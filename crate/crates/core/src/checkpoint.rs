//! `.vckpt` files: model parameters, optimizer moments and run metadata.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 8 | magic `VITAECKP` |
//! | 8 | 4 | format version (1) |
//! | 12 | 4 | metadata JSON length `m` |
//! | 16 | m | metadata JSON (run config, next epoch, optimizer step, hyperparameters) |
//! | 16+m | 4 | tensor count `n` |
//! | … | … | `n` table entries: name length u16, name UTF-8, dtype u8 (0 = f32, 1 = f64), rank u8, rank × u32 dims, payload offset u64 |
//! | … | … | payloads, raw little-endian, at their table offsets relative to the payload start |
//! | end−4 | 4 | CRC32 of every preceding byte |
//!
//! Optimizer moments are stored as tensors named `adam.m.<param>` and
//! `adam.v.<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ParamStore;
use crate::optim::{AdamWConfig, AdamWState};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"VITAECKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint metadata: {0}")]
    Meta(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn format_err(offset: usize, msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Resolved run configuration.
    pub config: serde_json::Value,
    /// First epoch a resumed run should execute.
    pub next_epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub adamw: Option<AdamWConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub params: ParamStore<T>,
    pub optimizer: Option<AdamWState<T>>,
}

pub fn encode_checkpoint<T: Real>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut named: Vec<(String, &Tensor<T>)> = ck.params.names.iter().cloned().zip(&ck.params.tensors).collect();
    if let Some(opt) = &ck.optimizer {
        for (name, m) in ck.params.names.iter().zip(&opt.m) {
            named.push((format!("adam.m.{name}"), m));
        }
        for (name, v) in ck.params.names.iter().zip(&opt.v) {
            named.push((format!("adam.v.{name}"), v));
        }
    }
    let meta = CheckpointMeta {
        adamw: ck.optimizer.as_ref().map(|o| o.cfg),
        step: ck.optimizer.as_ref().map_or(ck.meta.step, |o| o.t),
        ..ck.meta.clone()
    };
    let meta_json = serde_json::to_vec(&meta).map_err(|e| CheckpointError::Meta(e.to_string()))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (t.len() * T::DTYPE.size()) as u64;
    }
    for (_, t) in &named {
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a checkpoint, converting stored values to `T` if the file was
/// written in the other precision.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 20 {
        return Err(format_err(0, "file too short for a checkpoint"));
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&bytes[..body_len]);
    if stored != actual {
        return Err(format_err(
            body_len,
            format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    let mut r = Reader {
        bytes: &bytes[..body_len],
        pos: 0,
    };
    if r.take(8, "magic")? != MAGIC {
        return Err(format_err(0, "bad magic, not a .vckpt file"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format_err(8, format!("unsupported version {version}")));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_at = r.pos;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| format_err(meta_at, format!("metadata JSON: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| format_err(at, "tensor name is not UTF-8"))?
            .to_string();
        let dtype_at = r.pos;
        let dtype = DType::from_code(r.u8("dtype")?).ok_or_else(|| format_err(dtype_at, "unknown dtype code"))?;
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64("offset")? as usize;
        table.push((name, dtype, shape, offset, at));
    }
    let payload = &r.bytes[r.pos..];
    let mut tensors = Vec::with_capacity(count);
    for (name, dtype, shape, offset, at) in table {
        let n: usize = shape.iter().product();
        let size = dtype.size();
        let end = offset + n * size;
        if end > payload.len() {
            return Err(format_err(at, format!("payload of {name} runs past the end of the file")));
        }
        let data: Vec<T> = payload[offset..end]
            .chunks_exact(size)
            .map(|c| match dtype {
                DType::F32 => T::from_f64c(f32::read_le(c) as f64),
                DType::F64 => T::from_f64c(f64::read_le(c)),
            })
            .collect();
        tensors.push((name, Tensor::new(shape, data).expect("shape product matches")));
    }

    let mut params = ParamStore {
        names: Vec::new(),
        tensors: Vec::new(),
    };
    let (mut ms, mut vs) = (Vec::new(), Vec::new());
    for (name, t) in tensors {
        if let Some(p) = name.strip_prefix("adam.m.") {
            ms.push((p.to_string(), t));
        } else if let Some(p) = name.strip_prefix("adam.v.") {
            vs.push((p.to_string(), t));
        } else {
            params.names.push(name);
            params.tensors.push(t);
        }
    }
    let optimizer = match meta.adamw {
        Some(cfg) => {
            let names_match =
                |xs: &[(String, Tensor<T>)]| xs.len() == params.names.len() && xs.iter().zip(&params.names).all(|((a, _), b)| a == b);
            if !names_match(&ms) || !names_match(&vs) {
                return Err(CheckpointError::Meta("optimizer moments do not line up with parameters".into()));
            }
            Some(AdamWState {
                cfg,
                m: ms.into_iter().map(|(_, t)| t).collect(),
                v: vs.into_iter().map(|(_, t)| t).collect(),
                t: meta.step,
            })
        }
        None => None,
    };
    Ok(Checkpoint {
        meta,
        params,
        optimizer,
    })
}

pub fn write_checkpoint<T: Real>(path: &Path, ck: &Checkpoint<T>) -> Result<u32> {
    let bytes = encode_checkpoint(ck)?;
    std::fs::write(path, &bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(crc32fast::hash(&bytes))
}

/// Reads a checkpoint and returns it with the CRC32 of the whole file.
pub fn read_checkpoint<T: Real>(path: &Path) -> Result<(Checkpoint<T>, u32)> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok((decode_checkpoint(&bytes)?, crc32fast::hash(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MaskedVit3d, ModelConfig};

    fn sample() -> Checkpoint<f64> {
        let cfg = ModelConfig {
            input_side: 8,
            patch_side: 4,
            enc_dim: 12,
            enc_blocks: 1,
            enc_heads: 2,
            dec_dim: 6,
            dec_blocks: 1,
            dec_heads: 2,
            predictor_hidden: 4,
            ..ModelConfig::desk()
        };
        let model = MaskedVit3d::new(cfg).unwrap();
        let params = model.init_params::<f64>(3);
        let mut opt = AdamWState::new(AdamWConfig::default(), &params);
        let grads: Vec<_> = params.tensors.iter().map(|t| t.clone()).collect();
        let mut p2 = params.clone();
        opt.step(&mut p2, &grads, 1e-3).unwrap();
        Checkpoint {
            meta: CheckpointMeta {
                config: serde_json::json!({"seed": 3}),
                next_epoch: 4,
                step: 1,
                adamw: None,
            },
            params: p2,
            optimizer: Some(opt),
        }
    }

    #[test]
    fn round_trip_is_bit_exact_including_optimizer() {
        let ck = sample();
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint::<f64>(&bytes).unwrap();
        assert_eq!(back.params, ck.params);
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.meta.next_epoch, 4);
        assert_eq!(&bytes[..8], MAGIC);
    }

    #[test]
    fn precision_conversion_on_load() {
        let ck = sample();
        let as32 = decode_checkpoint::<f32>(&encode_checkpoint(&ck).unwrap()).unwrap();
        assert_eq!(as32.params, ck.params.cast::<f32>());
    }

    #[test]
    fn corruption_is_reported_with_offset() {
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        let n = bytes.len();
        bytes[n / 2] ^= 1;
        match decode_checkpoint::<f64>(&bytes) {
            Err(CheckpointError::Format { offset, .. }) => assert_eq!(offset as usize, n - 4),
            other => panic!("expected a format error, got {other:?}"),
        }
        let mut bad_magic = encode_checkpoint(&sample()).unwrap();
        bad_magic[0] = b'X';
        let len = bad_magic.len() - 4;
        let crc = crc32fast::hash(&bad_magic[..len]);
        bad_magic[len..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_checkpoint::<f64>(&bad_magic), Err(CheckpointError::Format { offset: 0, .. })));
        assert!(decode_checkpoint::<f64>(&bytes[..10]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.vckpt");
        let ck = sample();
        let crc = write_checkpoint(&path, &ck).unwrap();
        let (back, crc2) = read_checkpoint::<f64>(&path).unwrap();
        assert_eq!(crc, crc2);
        assert_eq!(back.params, ck.params);
        assert!(read_checkpoint::<f64>(&dir.path().join("missing.vckpt")).is_err());
    }
}
