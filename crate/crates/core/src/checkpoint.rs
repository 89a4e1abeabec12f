//! Self-describing binary checkpoint.
//!
//! Layout: the 8-byte magic `QAPCKPT1`, a little-endian `u64` header length,
//! a JSON header (model config, vocabulary hash, tensor names and shapes in
//! declaration order), then every tensor's values as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"QAPCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint tensor layout does not match its config: {0}")]
    Layout(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_hash: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Hash of the vocabulary the model was trained with.
    pub vocab_hash: String,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            tensors: self
                .params
                .names()
                .into_iter()
                .zip(self.params.tensors())
                .map(|(name, t)| TensorEntry {
                    name,
                    rows: t.rows,
                    cols: t.cols,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize.checked_add(header_len).ok_or(CheckpointError::Truncated)?;
        let json = bytes.get(16..body_start).ok_or(CheckpointError::Truncated)?;
        let header: Header = serde_json::from_slice(json)?;
        header
            .config
            .validate()
            .map_err(|e| CheckpointError::Layout(e.to_string()))?;

        let mut params = ModelParams::zeros(&header.config);
        let names = params.names();
        if names.len() != header.tensors.len() {
            return Err(CheckpointError::Layout(format!(
                "expected {} tensors, found {}",
                names.len(),
                header.tensors.len()
            )));
        }
        let mut offset = body_start;
        for ((tensor, name), entry) in params.tensors_mut().into_iter().zip(&names).zip(&header.tensors) {
            if *name != entry.name || tensor.rows != entry.rows || tensor.cols != entry.cols {
                return Err(CheckpointError::Layout(format!(
                    "tensor {} ({}x{}) where {name} ({}x{}) was expected",
                    entry.name, entry.rows, entry.cols, tensor.rows, tensor.cols
                )));
            }
            for v in tensor.data.iter_mut() {
                let chunk = bytes.get(offset..offset + 8).ok_or(CheckpointError::Truncated)?;
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
                offset += 8;
            }
        }
        if offset != bytes.len() {
            return Err(CheckpointError::Layout(format!(
                "{} trailing bytes",
                bytes.len() - offset
            )));
        }
        Ok(Self {
            config: header.config,
            vocab_hash: header.vocab_hash,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
