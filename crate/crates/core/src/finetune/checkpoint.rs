//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "MVQA"
//! version    u32
//! config     u64 length + UTF-8 JSON of ModelConfig
//! lora       u8 (1 = adapters enabled)
//! n_params   u64
//! n_params × { name: u32 length + UTF-8, flags: u8 (bit0 trainable, bit1 decay),
//!              ndim: u32, dims: ndim × u64, data: numel × f64 }
//! ```
//!
//! Nothing may follow the last parameter.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::model::{Model, ModelConfig};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVQA";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} unexpected bytes after the last parameter")]
    TrailingBytes(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unmerge adapters before saving")]
    Merged,
}

type Result<T> = std::result::Result<T, CheckpointError>;

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    if model.is_merged() {
        return Err(CheckpointError::Merged);
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.push(u8::from(model.lora_enabled()));
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(u8::from(p.trainable) | (u8::from(p.decay) << 1));
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&p.tensor.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &'static str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n).map_err(|_| CheckpointError::Corrupt(format!("{what} length {n}")))
    }
}

fn corrupt(e: impl ToString) -> CheckpointError {
    CheckpointError::Corrupt(e.to_string())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let n = r.len("config")?;
    let config: ModelConfig = serde_json::from_slice(r.take(n, "config")?).map_err(corrupt)?;
    config.validate().map_err(corrupt)?;
    let lora_enabled = r.u8("lora flag")? != 0;
    let n_params = r.len("parameter count")?;
    let mut store = ParamStore::new();
    for _ in 0..n_params {
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?).map_err(corrupt)?.to_string();
        let flags = r.u8("flags")?;
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.len("dims")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| corrupt(format!("{name}: shape {shape:?} overflows")))?;
        let data = r
            .take(numel, "tensor data")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| corrupt(format!("{name}: {e}")))?;
        store.insert(name.clone(), tensor, flags & 2 != 0).map_err(corrupt)?;
        store.set_trainable(&name, flags & 1 != 0).map_err(corrupt)?;
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    let mut model = Model::from_parts(config, store);
    model.set_lora_enabled(lora_enabled);
    Ok(model)
}

/// Writes through a sibling temporary file and renames it into place, so a
/// crash never leaves a partial checkpoint at `path`.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let bytes = encode_checkpoint(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
