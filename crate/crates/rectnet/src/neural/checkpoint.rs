//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!   magic "RCTN" | version u32 | meta_len u64 | meta JSON bytes |
//!   param_count u64 | param_count * f32 payload
//!
//! The meta JSON carries the model configuration and the tensor table
//! (name + shape per tensor, in payload order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RCTN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Model kind and configuration, owned by the models module.
    pub model: Value,
    pub tensors: Vec<TensorInfo>,
}

pub fn save(path: &Path, meta: &CheckpointMeta, tensors: &[(String, Vec<usize>, &[f32])]) -> Result<()> {
    let declared: usize = meta.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let actual: usize = tensors.iter().map(|(_, _, d)| d.len()).sum();
    if declared != actual {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint meta declares {declared} parameters, payload has {actual}"
        )));
    }
    let meta_bytes = serde_json::to_vec(meta).expect("meta serializes");
    let mut out = Vec::with_capacity(4 + 4 + 8 + meta_bytes.len() + 8 + actual * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.extend_from_slice(&(actual as u64).to_le_bytes());
    for (_, _, data) in tensors {
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub payload: Vec<f32>,
}

pub fn load(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let need = |n: usize, at: usize| -> Result<()> {
        if bytes.len() < at + n {
            Err(Error::format(path, "truncated checkpoint"))
        } else {
            Ok(())
        }
    };
    need(8, 0)?;
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    need(8, 8)?;
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    need(meta_len, 16)?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..16 + meta_len])
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut at = 16 + meta_len;
    need(8, at)?;
    let count = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
    at += 8;
    let declared: usize = meta.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if declared != count {
        return Err(Error::PayloadSizeMismatch {
            expected: declared,
            actual: count,
        });
    }
    if bytes.len() != at + count * 4 {
        return Err(Error::PayloadSizeMismatch {
            expected: at + count * 4,
            actual: bytes.len(),
        });
    }
    let payload: Vec<f32> = bytes[at..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(LoadedCheckpoint { meta, payload })
}
