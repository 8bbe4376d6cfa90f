//! Model persistence: a one-line header naming the format, its version, and
//! the payload checksum, followed by the model serialized as JSON. Loading
//! verifies all three before touching the payload, so a truncated, tampered,
//! or future-format file fails loudly instead of deserializing into garbage.

use std::fs;
use std::path::Path;

use geolevels_core::scaling::MultiLevelModel;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sha256_hex;

pub const CHECKPOINT_FORMAT: &str = "geolevels-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint format version {found}; this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch; the file is corrupt")]
    ChecksumMismatch,
    #[error("checkpoint payload: {0}")]
    Payload(#[from] serde_json::Error),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    sha256: String,
}

/// The checkpoint file content for a model, ready to write or embed.
pub fn model_bytes(model: &MultiLevelModel) -> Result<Vec<u8>, CheckpointError> {
    let payload = serde_json::to_vec(model)?;
    let header = Header {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        sha256: sha256_hex(&payload),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    Ok(bytes)
}

pub fn save_model(path: &Path, model: &MultiLevelModel) -> Result<(), CheckpointError> {
    fs::write(path, model_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MultiLevelModel, CheckpointError> {
    let bytes = fs::read(path)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Header("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(CheckpointError::Header(format!("unexpected format {:?}", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let payload = &bytes[newline + 1..];
    if sha256_hex(payload) != header.sha256 {
        return Err(CheckpointError::ChecksumMismatch);
    }
    Ok(serde_json::from_slice(payload)?)
}
