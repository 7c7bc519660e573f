//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "FRESTCKP"
//! version          u32      currently 1
//! meta_len         u32      followed by that many bytes of UTF-8 JSON
//! tensor_count     u32
//! per tensor:
//!   name_len  u32, name bytes (UTF-8)
//!   rank      u32, dims u32 * rank
//!   payload   f32 * product(dims), row-major
//! ```
//!
//! Saving the same state twice produces identical bytes, and a
//! save/load/save cycle is byte-preserving — which is what makes
//! "training N epochs" and "training k epochs, resuming, training N-k
//! more" comparable checkpoint-for-checkpoint.
//!
//! Optimizer moments ride along as ordinary tensors under the reserved
//! name prefixes `adam.m.` and `adam.v.`.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::model::params::ParamSet;
use crate::model::{Model, ModelConfig};
use crate::schedule::ScheduleConfig;
use crate::train::TrainConfig;

const MAGIC: &[u8; 8] = b"FRESTCKP";
const VERSION: u32 = 1;

/// Everything needed to resume training or run inference, minus tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    /// Training hyperparameters the run was launched with, if any.
    pub train: Option<TrainConfig>,
    /// Number of fully completed epochs.
    pub epochs_completed: usize,
    /// Number of optimizer updates applied so far.
    pub adam_step: u64,
}

/// A checkpoint in memory: metadata, model parameters, and (for resumable
/// snapshots) the Adam moment estimates.
#[derive(Debug, Clone)]
pub struct CheckpointState {
    pub meta: CheckpointMeta,
    pub params: ParamSet<f32>,
    pub adam_m: Option<ParamSet<f32>>,
    pub adam_v: Option<ParamSet<f32>>,
}

impl CheckpointState {
    pub fn model(&self) -> Model {
        Model {
            config: self.meta.model.clone(),
            params: self.params.clone(),
        }
    }
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, tensor: &ArrayD<f32>) {
    push_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    push_u32(buf, tensor.ndim() as u32);
    for &d in tensor.shape() {
        push_u32(buf, d as u32);
    }
    for &v in tensor.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize a checkpoint to bytes.
pub fn encode_checkpoint(state: &CheckpointState) -> Result<Vec<u8>> {
    let meta = serde_json::to_string(&state.meta)
        .map_err(|e| Error::Checkpoint(format!("meta serialization: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    push_u32(&mut buf, meta.len() as u32);
    buf.extend_from_slice(meta.as_bytes());
    let moment_count = state.adam_m.as_ref().map_or(0, |m| m.tensor_count())
        + state.adam_v.as_ref().map_or(0, |v| v.tensor_count());
    push_u32(&mut buf, (state.params.tensor_count() + moment_count) as u32);
    for (name, tensor) in state.params.iter() {
        push_tensor(&mut buf, name, tensor);
    }
    if let Some(m) = &state.adam_m {
        for (name, tensor) in m.iter() {
            push_tensor(&mut buf, &format!("adam.m.{name}"), tensor);
        }
    }
    if let Some(v) = &state.adam_v {
        for (name, tensor) in v.iter() {
            push_tensor(&mut buf, &format!("adam.v.{name}"), tensor);
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse checkpoint bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<CheckpointState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta_bytes = r.take(meta_len)?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Checkpoint(format!("meta parse: {e}")))?;
    let tensor_count = r.u32()? as usize;
    let mut params = ParamSet::new();
    let mut adam_m = ParamSet::new();
    let mut adam_v = ParamSet::new();
    for _ in 0..tensor_count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("tensor {name}: rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        let payload = r.take(len * 4)?;
        let mut data = Vec::with_capacity(len);
        for chunk in payload.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        if let Some(rest) = name.strip_prefix("adam.m.") {
            adam_m.insert(rest, tensor);
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            adam_v.insert(rest, tensor);
        } else {
            params.insert(&name, tensor);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(CheckpointState {
        meta,
        params,
        adam_m: (adam_m.tensor_count() > 0).then_some(adam_m),
        adam_v: (adam_v.tensor_count() > 0).then_some(adam_v),
    })
}

/// Write a checkpoint file atomically.
pub fn save_checkpoint(path: &Path, state: &CheckpointState) -> Result<()> {
    atomic_write(path, &encode_checkpoint(state)?)
}

/// Read a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<CheckpointState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
