//! Checkpoint files.
//!
//! Layout: 8-byte magic `USMACKPT`, `u32` format version, `u64` header
//! length, a JSON header, then every parameter tensor as little-endian
//! `f64` in key order. The header holds the model configuration, scene
//! schema, normalization statistics and, per tensor, its key path, shape
//! and byte offset relative to the end of the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unisoma_core::model::{check_params, ModelConfig, SceneSchema, TargetSpace, Unisoma};
use unisoma_core::scene::NormStats;
use unisoma_core::{ModelParams, Tensor};

use crate::error::{json_error, Error, Result};

pub const MAGIC: &[u8; 8] = b"USMACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub key: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    schema: SceneSchema,
    stats: NormStats,
    target_space: TargetSpace,
    tensors: Vec<TensorEntry>,
}

pub fn encode(model: &Unisoma) -> Vec<u8> {
    let mut payload = Vec::new();
    let tensors = model
        .params
        .iter()
        .map(|(key, t)| {
            let offset = payload.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            TensorEntry {
                key: key.clone(),
                shape: t.shape().to_vec(),
                offset,
            }
        })
        .collect();
    let header = Header {
        config: model.config.clone(),
        schema: model.schema.clone(),
        stats: model.stats.clone(),
        target_space: model.target_space,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("checkpoint headers serialize");
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Unisoma> {
    let truncated = |needed: usize| Error::Truncated {
        path: path.to_path_buf(),
        offset: bytes.len(),
        needed,
    };
    if bytes.len() < PREAMBLE {
        return Err(truncated(PREAMBLE - bytes.len()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            message: "not a checkpoint file".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::SchemaVersion {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = PREAMBLE.saturating_add(header_len);
    if bytes.len() < body {
        return Err(truncated(body - bytes.len()));
    }
    let text = std::str::from_utf8(&bytes[PREAMBLE..body]).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: PREAMBLE + e.valid_up_to(),
        message: "header is not UTF-8".into(),
    })?;
    let header: Header = serde_json::from_str(text).map_err(|e| match json_error(path, text, &e) {
        Error::Parse { path, offset, message } => Error::Parse {
            path,
            offset: offset + PREAMBLE,
            message,
        },
        other => other,
    })?;
    let mut params = ModelParams::new();
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        let start = body.saturating_add(entry.offset);
        let end = start.saturating_add(len * 8);
        if end > bytes.len() {
            return Err(truncated(end - bytes.len()));
        }
        let data = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data).map_err(|e| Error::invalid(path, e))?;
        params.insert(entry.key.clone(), t);
    }
    check_params(&header.config, &header.schema, &params).map_err(|e| Error::invalid(path, e))?;
    Ok(Unisoma {
        config: header.config,
        schema: header.schema,
        stats: header.stats,
        target_space: header.target_space,
        params,
    })
}

pub fn save(model: &Unisoma, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Unisoma> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
