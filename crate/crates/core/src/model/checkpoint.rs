//! Versioned JSON checkpoint container.
//!
//! Floats are written in shortest round-trip form and parsed with correct
//! rounding, so a save/load cycle reproduces every parameter bit-for-bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SeqModel;
use crate::error::{Error, Result};
use crate::provenance;

pub const FORMAT: &str = "bapo-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Hash of the resolved configuration that produced this model.
    pub config_hash: String,
    pub step: u64,
    pub model: SeqModel,
}

impl Checkpoint {
    pub fn new(model: SeqModel, config_hash: impl Into<String>, step: u64) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            config_hash: config_hash.into(),
            step,
            model,
        }
    }
}

/// Writes a checkpoint and returns the SHA-256 of the written bytes.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<String> {
    let bytes = serde_json::to_vec(ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
    provenance::write_atomic(path, &bytes)?;
    Ok(provenance::sha256_hex(&bytes))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: corrupt checkpoint: {e}", path.display())))?;
    if ckpt.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint (format {:?})",
            path.display(),
            ckpt.format
        )));
    }
    if ckpt.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: checkpoint version {} is not supported (expected {VERSION})",
            path.display(),
            ckpt.version
        )));
    }
    ckpt.model.check_integrity()?;
    Ok(ckpt)
}

/// Loads a checkpoint and refuses it unless it was produced under
/// `config_hash`.
pub fn load_expecting(path: &Path, config_hash: &str) -> Result<Checkpoint> {
    let ckpt = load(path)?;
    if ckpt.config_hash != config_hash {
        return Err(Error::StaleArtifact {
            path: path.to_path_buf(),
            reason: format!(
                "checkpoint config hash {} does not match expected {config_hash}",
                ckpt.config_hash
            ),
        });
    }
    Ok(ckpt)
}
