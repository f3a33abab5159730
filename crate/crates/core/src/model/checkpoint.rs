//! `mpnn-ckpt/1` container.
//!
//! ```text
//! magic        8 bytes   "MPNNCKPT"
//! version      u32 LE    1
//! header_len   u64 LE
//! header       header_len bytes of UTF-8 JSON
//! payload      f64 LE values: every tensor in header order, then for each
//!              message layer its running mean followed by running variance
//! ```
//!
//! The file must end exactly after the payload.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{GroupTag, ModelConfig, ModelError, MpnnModel};
use crate::autodiff::{RunningStats, Tensor};
use crate::losses::LossConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MPNNCKPT";
pub const CHECKPOINT_SCHEMA: &str = "mpnn-ckpt/1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not an {CHECKPOINT_SCHEMA} file: {0}")]
    Version(String),
    #[error("checkpoint truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("checkpoint does not match its embedded config: {0}")]
    Shape(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MpnnModel,
    pub loss_config: Option<LossConfig>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    group: GroupTag,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    config: ModelConfig,
    loss_config: Option<LossConfig>,
    tensors: Vec<TensorEntry>,
    running_stats_layers: usize,
}

pub fn encode_checkpoint(model: &MpnnModel, loss_config: Option<&LossConfig>) -> Vec<u8> {
    let header = Header {
        schema: CHECKPOINT_SCHEMA.to_string(),
        config: model.config().clone(),
        loss_config: loss_config.cloned(),
        tensors: model
            .parameters()
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                group: p.group,
            })
            .collect(),
        running_stats_layers: model.running_stats().len(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    let values = model
        .parameters()
        .iter()
        .flat_map(|p| p.tensor.data().iter())
        .chain(
            model
                .running_stats()
                .iter()
                .flat_map(|s| s.mean.iter().chain(s.var.iter())),
        );
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated {
            needed: usize::MAX,
            available: 0,
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8).map_err(|_| CheckpointError::Version("missing magic bytes".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Version("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(format!("format version {version}")));
    }
    let header_len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| CheckpointError::Truncated {
        needed: usize::MAX,
        available: bytes.len(),
    })?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.schema != CHECKPOINT_SCHEMA {
        return Err(CheckpointError::Version(format!("schema {:?}", header.schema)));
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n = entry.shape.iter().product();
        let data = r.f64s(n)?;
        let tensor =
            Tensor::new(entry.shape, data).map_err(|e| CheckpointError::Header(e.to_string()))?;
        tensors.push((entry.name, tensor));
    }
    let h = header.config.hidden_dim;
    let mut running = Vec::with_capacity(header.running_stats_layers);
    for _ in 0..header.running_stats_layers {
        let mean = r.f64s(h)?;
        let var = r.f64s(h)?;
        running.push(RunningStats { mean, var });
    }
    let trailing = bytes.len() - r.pos;
    if trailing != 0 {
        return Err(CheckpointError::TrailingBytes(trailing));
    }
    let model = MpnnModel::from_parts(header.config, tensors, running)?;
    Ok(Checkpoint {
        model,
        loss_config: header.loss_config,
    })
}

/// Hex SHA-256 of an encoded checkpoint.
pub fn checkpoint_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
