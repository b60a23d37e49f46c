//! Versioned JSON checkpoints for the toy victim.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::ToyVictim;

pub const CHECKPOINT_FORMAT: &str = "tabperm-toy-victim";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("{path}: not a victim checkpoint (format {found:?})")]
    Format { path: String, found: String },
    #[error("{path}: unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { path: String, found: u32 },
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    victim: ToyVictim,
}

impl ToyVictim {
    pub fn to_checkpoint_json(&self) -> String {
        let env = Envelope {
            format: CHECKPOINT_FORMAT.to_owned(),
            version: CHECKPOINT_VERSION,
            victim: self.clone(),
        };
        serde_json::to_string(&env).expect("victim serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_json()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let p = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: p.clone(),
            source,
        })?;
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|source| CheckpointError::Json {
                path: p.clone(),
                source,
            })?;
        let format = raw
            .get("format")
            .and_then(|f| f.as_str())
            .unwrap_or_default();
        if format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format {
                path: p,
                found: format.to_owned(),
            });
        }
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                path: p,
                found: version,
            });
        }
        let env: Envelope = serde_json::from_value(raw)
            .map_err(|source| CheckpointError::Json { path: p, source })?;
        Ok(env.victim)
    }
}
