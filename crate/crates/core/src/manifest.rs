//! Hashes and run manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION"));

/// SHA-256 of the value's JSON serialization, hex encoded.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Written next to every training / evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub code_version: String,
    pub demo_corpus_hash: Option<String>,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: u64,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: serde_json::Value, seeds: Vec<u64>) -> Self {
        Self {
            command: command.into(),
            config,
            seeds,
            code_version: CODE_VERSION.to_string(),
            demo_corpus_hash: None,
            started_at: now(),
            finished_at: 0,
            outputs: Vec::new(),
        }
    }

    pub fn finish(&mut self) {
        self.finished_at = now();
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
