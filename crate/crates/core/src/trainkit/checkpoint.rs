//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "DTUNCKPT" | version u32 | config_hash u64 | iteration u64 |
//!   tensor_count u32 | tensors... | optimizer_flag u8 | [optimizer block]
//!
//! Each tensor: name_len u32 | name bytes | dtype u8 (1 = f64) |
//! ndim u8 | dims u64 x ndim | payload (f64 LE x numel).
//!
//! The tensor section carries only filtered LoRA state; base weights never
//! enter a checkpoint. Files are written to a temp path and renamed so a
//! partial write can never be mistaken for a checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::lora::AdapterSet;
use crate::model::ModelConfig;
use crate::numerics::Tensor;

use super::optim::{Moments, OptimizerState};

const MAGIC: &[u8; 8] = b"DTUNCKPT";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated or corrupt: {0}")]
    Truncated(String),
    #[error("unsupported tensor dtype tag {0}")]
    BadDtype(u8),
    #[error("trailing bytes after checkpoint payload")]
    TrailingBytes,
}

/// Everything a checkpoint restores.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub iteration: u64,
    pub tensors: BTreeMap<String, Tensor>,
    pub optimizer: Option<OptimizerState>,
}

/// FNV-1a fingerprint of the architecture knobs a checkpoint depends on.
pub fn config_fingerprint(cfg: &ModelConfig) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    let mut mix = |v: u64| {
        for byte in v.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    mix(cfg.vocab_size as u64);
    mix(cfg.d_model as u64);
    mix(cfg.n_layers as u64);
    mix(cfg.n_heads as u64);
    mix(cfg.n_kv_heads as u64);
    mix(cfg.window.map_or(u64::MAX, |w| w as u64));
    mix(cfg.max_seq as u64);
    mix(cfg.d_ff as u64);
    h
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(DTYPE_F64);
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(format!(
                "need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Truncated("tensor name not utf-8".into()))?;
        let dtype = self.u8()?;
        if dtype != DTYPE_F64 {
            return Err(CheckpointError::BadDtype(dtype));
        }
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = self.take(numel * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(&shape, data)
            .map_err(|e| CheckpointError::Truncated(format!("tensor {name}: {e}")))?;
        Ok((name, tensor))
    }
}

/// Serialize the adapter set (LoRA tensors only) plus metadata, and the
/// optimizer state when resuming matters. Atomic: temp file then rename.
pub fn save_checkpoint(
    path: &Path,
    adapters: &AdapterSet,
    optimizer: Option<&OptimizerState>,
    iteration: u64,
    config_hash: u64,
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&config_hash.to_le_bytes());
    buf.extend_from_slice(&iteration.to_le_bytes());

    let tensors = adapters.named_tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        write_tensor(&mut buf, name, t);
    }

    match optimizer {
        None => buf.push(0),
        Some(state) => {
            buf.push(1);
            buf.extend_from_slice(&state.step.to_le_bytes());
            buf.extend_from_slice(&(state.moments.len() as u32).to_le_bytes());
            for (name, moments) in &state.moments {
                write_tensor(&mut buf, name, &moments.m);
                write_tensor(&mut buf, name, &moments.v);
            }
        }
    }

    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut file = fs::File::create(&tmp).map_err(io_err)?;
        file.write_all(&buf).map_err(io_err)?;
        file.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

/// Parse a checkpoint in full; any structural problem fails the load, so a
/// truncated file never yields partial state.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let config_hash = r.u64()?;
    let iteration = r.u64()?;
    let tensor_count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..tensor_count {
        let (name, t) = r.tensor()?;
        tensors.insert(name, t);
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let count = r.u32()? as usize;
            let mut moments = BTreeMap::new();
            for _ in 0..count {
                let (name_m, m) = r.tensor()?;
                let (name_v, v) = r.tensor()?;
                if name_m != name_v {
                    return Err(CheckpointError::Truncated(format!(
                        "moment pair mismatch: {name_m} vs {name_v}"
                    )));
                }
                moments.insert(name_m, Moments { m, v });
            }
            Some(OptimizerState { step, moments })
        }
        other => {
            return Err(CheckpointError::Truncated(format!(
                "bad optimizer flag {other}"
            )))
        }
    };
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes);
    }
    Ok(Checkpoint {
        config_hash,
        iteration,
        tensors,
        optimizer,
    })
}
