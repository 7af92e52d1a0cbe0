//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "UDNSCKPT"
//! version     u32      1
//! header_len  u32
//! header      JSON     {"config": {...}, "tensors": [{"name","rows","cols","offset"}], "meta": {...}}
//! data        f32[]    row-major tensors; `offset` counts f32 elements from the start of data
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Model, ModelConfig, ModelError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UDNSCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor {0} runs past the end of the data section")]
    Truncated(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

impl Model<f32> {
    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            tensors: self.names.iter().cloned().zip(self.params.iter().cloned()).collect(),
            meta,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        Model::from_named(ck.config.clone(), &ck.tensors)
    }
}

/// Writes through a sibling temp file and renames, so readers never see a
/// partial checkpoint.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let mut entries = Vec::with_capacity(ck.tensors.len());
    let mut offset = 0;
    for (name, t) in &ck.tensors {
        entries.push(TensorEntry { name: name.clone(), rows: t.rows, cols: t.cols, offset });
        offset += t.len();
    }
    let header = Header { config: ck.config.clone(), tensors: entries, meta: ck.meta.clone() };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + offset * 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &ck.tensors {
        for x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let buf = fs::read(path)?;
    if buf.len() < 16 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let hlen = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    let hend = 16usize.checked_add(hlen).filter(|&e| e <= buf.len()).ok_or_else(|| CheckpointError::Header("header length".into()))?;
    let header: Header = serde_json::from_slice(&buf[16..hend]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let data = &buf[hend..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n = e.rows * e.cols;
        let start = e.offset * 4;
        let end = start + n * 4;
        if end > data.len() {
            return Err(CheckpointError::Truncated(e.name));
        }
        let vals = data[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((e.name, Tensor::from_vec(e.rows, e.cols, vals)));
    }
    Ok(Checkpoint { config: header.config, tensors, meta: header.meta })
}
