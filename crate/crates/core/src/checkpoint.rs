//! Single-file checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"UNISTCKP" | u32 version | u64 header_len | header JSON
//! u64 param_count
//! per param: u32 path_len | path | u32 rank | u64 dims[rank] | f64 values[prod(dims)]
//! ```
//!
//! Values are stored as raw bits, so a round trip is bit-exact.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError, ModelParams, Variant};
use crate::tensor::Tensor;
use crate::training::{Normalizer, ResolvedSplit};

pub const MAGIC: &[u8; 8] = b"UNISTCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("checkpoint version {0} is not supported")]
    Version(u32),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint is truncated or malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub variant: Variant,
    pub normalizer: Normalizer,
    /// Split the model was trained with; `eval --split` reads it.
    #[serde(default)]
    pub split: Option<ResolvedSplit>,
    #[serde(default)]
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub normalizer: Normalizer,
    pub split: Option<ResolvedSplit>,
    pub best_epoch: usize,
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            model: self.model.config().clone(),
            variant: self.model.variant(),
            normalizer: self.normalizer,
            split: self.split.clone(),
            best_epoch: self.best_epoch,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let params = self.model.params();
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for (path, t) in params.iter() {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::Magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let header_len = read_u64(&mut r)? as usize;
        let header_bytes = take(&mut r, header_len)?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)?;
        let count = read_u64(&mut r)?;
        let mut params = ModelParams::new();
        for _ in 0..count {
            let path_len = read_u32(&mut r)? as usize;
            let path = std::str::from_utf8(take(&mut r, path_len)?)
                .map_err(|_| CheckpointError::Malformed("parameter path is not UTF-8".into()))?
                .to_string();
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let len: usize = shape.iter().product();
            let raw = take(&mut r, len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            params.insert(path, t);
        }
        if !r.is_empty() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", r.len())));
        }
        let model = Model::from_parts(header.model, header.variant, params)?;
        Ok(Self {
            model,
            normalizer: header.normalizer,
            split: header.split,
            best_epoch: header.best_epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8], CheckpointError> {
    if r.len() < n {
        return Err(CheckpointError::Malformed(format!("needed {n} bytes, {} left", r.len())));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8]) -> Result<u32, CheckpointError> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().expect("4 bytes")))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, CheckpointError> {
    Ok(u64::from_le_bytes(take(r, 8)?.try_into().expect("8 bytes")))
}
