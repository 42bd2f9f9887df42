//! Self-describing little-endian checkpoint container.
//!
//! Layout: a 64-byte header, the model configuration as JSON, the training
//! stage history as JSON, the named tensors, and a SHA-256 trailer over
//! everything before it.
//!
//! Header fields (little-endian):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 8    | magic `OSPNCKPT`              |
//! | 8      | 4    | format version                |
//! | 12     | 1    | dtype code (1 = f32, 2 = f64) |
//! | 16     | 8    | config length                 |
//! | 24     | 8    | stage metadata length         |
//! | 32     | 8    | tensor count                  |
//! | 40     | 16   | config hash                   |
//! | 56     | 8    | body length                   |
//!
//! Each tensor record is `name_len: u32, name, rank: u32, dims: u64 x rank,
//! dtype: u8, raw data`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, SpatialNet};
use crate::error::{Error, Result};
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: &[u8; 8] = b"OSPNCKPT";
pub const VERSION: u32 = 1;
const HEADER: usize = 64;
const TRAILER: usize = 32;

/// One completed training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMeta {
    pub stage: String,
    pub epochs: usize,
    pub signal_seconds: f64,
}

/// A model plus the history of stages that produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Float = f32> {
    pub model: SpatialNet<T>,
    pub stages: Vec<StageMeta>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(format!("truncated while reading {}", what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| corrupt(format!("{} length {} out of range", what, v)))
    }
}

impl<T: Float> Checkpoint<T> {
    pub fn new(model: SpatialNet<T>, stages: Vec<StageMeta>) -> Self {
        Checkpoint { model, stages }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.model.config().to_json().into_bytes();
        let meta = serde_json::to_vec(&self.stages).expect("stage metadata serializes");
        let mut body = Vec::new();
        body.extend_from_slice(&cfg);
        body.extend_from_slice(&meta);
        let params = self.model.params();
        for (name, t) in params.iter() {
            body.extend_from_slice(&(name.len() as u32).to_le_bytes());
            body.extend_from_slice(name.as_bytes());
            body.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                body.extend_from_slice(&(d as u64).to_le_bytes());
            }
            body.push(T::DTYPE.code());
            body.extend_from_slice(&T::to_le_bytes_vec(t.data()));
        }
        let mut out = Vec::with_capacity(HEADER + body.len() + TRAILER);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&[0u8; 3]);
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.model.config().hash());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        debug_assert_eq!(out.len(), HEADER);
        out.extend_from_slice(&body);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses a checkpoint; tensors stored in another precision are
    /// converted to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(corrupt(format!(
                "truncated: {} bytes, header needs {}",
                bytes.len(),
                HEADER
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic: not a checkpoint file"));
        }
        let mut r = Reader { buf: bytes, pos: 8 };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(corrupt(format!(
                "unsupported checkpoint version {} (expected {})",
                version, VERSION
            )));
        }
        let file_dtype = r.take(4, "dtype")?[0];
        DType::from_code(file_dtype).ok_or_else(|| corrupt(format!("unknown dtype code {}", file_dtype)))?;
        let cfg_len = r.len("config")?;
        let meta_len = r.len("metadata")?;
        let count = r.len("tensor count")?;
        let hash: [u8; 16] = r.take(16, "config hash")?.try_into().unwrap();
        let body_len = r.len("body")?;
        let total = HEADER
            .checked_add(body_len)
            .and_then(|v| v.checked_add(TRAILER))
            .ok_or_else(|| corrupt("body length overflows"))?;
        if bytes.len() < total {
            return Err(corrupt(format!("truncated: {} bytes, expected {}", bytes.len(), total)));
        }
        if bytes.len() > total {
            return Err(corrupt(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - total
            )));
        }
        let digest = Sha256::digest(&bytes[..HEADER + body_len]);
        if digest.as_slice() != &bytes[HEADER + body_len..] {
            return Err(corrupt("checksum mismatch: file is corrupt"));
        }
        let mut r = Reader {
            buf: &bytes[..HEADER + body_len],
            pos: HEADER,
        };
        let cfg: ModelConfig =
            serde_json::from_slice(r.take(cfg_len, "config")?).map_err(|e| corrupt(format!("config: {}", e)))?;
        if cfg.hash() != hash {
            return Err(corrupt("config hash mismatch"));
        }
        let stages: Vec<StageMeta> = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| corrupt(format!("stage metadata: {}", e)))?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nl = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(nl, "name")?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.len("dimension")?);
            }
            let code = r.take(1, "tensor dtype")?[0];
            let dtype =
                DType::from_code(code).ok_or_else(|| corrupt(format!("tensor {}: unknown dtype {}", name, code)))?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt(format!("tensor {}: shape overflows", name)))?;
            let nbytes = numel
                .checked_mul(dtype.size())
                .ok_or_else(|| corrupt(format!("tensor {}: size overflows", name)))?;
            let raw = r.take(nbytes, &name)?;
            let data: Vec<T> = match dtype {
                DType::F32 => f32::from_le_bytes_slice(raw)
                    .into_iter()
                    .map(|v| T::from(v).unwrap())
                    .collect(),
                DType::F64 => f64::from_le_bytes_slice(raw)
                    .into_iter()
                    .map(|v| T::from(v).unwrap())
                    .collect(),
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != r.buf.len() {
            return Err(corrupt("unexpected bytes after the last tensor"));
        }
        let model = SpatialNet::from_params(cfg, tensors)?;
        Ok(Checkpoint { model, stages })
    }

    /// Writes the checkpoint and a TOML copy of its configuration next to
    /// it (`<path>.toml`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_bytes())?;
        let toml = toml::to_string(self.model.config()).map_err(|e| Error::Parse(e.to_string()))?;
        let mut side = path.as_os_str().to_owned();
        side.push(".toml");
        std::fs::write(side, toml)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {}", path.display(), m)),
            other => other,
        })
    }
}
