//! Checkpoint container and atomic file writes.
//!
//! A checkpoint is one JSON document holding the schema, every parameter
//! tensor, the Adagrad accumulators, the gate state (when the run is gated),
//! the frozen rms rescale, and the global step. JSON floats are written in
//! shortest round-trip form, so `load(save(m))` reproduces bit-identical
//! forward outputs.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::GateState;
use crate::model::CtrModel;

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: CtrModel,
    /// Present while gates are trained; absent after absorption.
    pub gates: Option<GateState>,
    /// Active rms divisor for categorical slots, if the run used one.
    pub rms_div: Option<f64>,
}

/// Write-then-rename so interrupted runs never leave truncated files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io {
        path: path.display().to_string(),
        source: e,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
    }
    let tmp = path.with_extension("tmp.partial");
    {
        let mut f = std::fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(bytes).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path).map_err(io_err)
}

pub fn save(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let json = serde_json::to_vec(checkpoint).map_err(|e| Error::CorruptArtifact {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    write_atomic(path, &json)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::CorruptArtifact {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}
