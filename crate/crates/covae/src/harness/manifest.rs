//! Run manifests: enough provenance to re-run or audit any artifact.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// SHA-256 of the exact configuration text, hex-encoded.
pub fn config_hash(config_text: &str) -> String {
    let mut h = Sha256::new();
    h.update(config_text.as_bytes());
    format!("{:x}", h.finalize())
}

fn git_revision() -> Option<String> {
    let out = Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    if !out.status.success() {
        return None;
    }
    let rev = String::from_utf8(out.stdout).ok()?.trim().to_string();
    (!rev.is_empty()).then_some(rev)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub created: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_fingerprint: Option<String>,
    pub git_revision: Option<String>,
}

impl RunManifest {
    pub fn new(config_text: &str, seed: u64, dataset_fingerprint: Option<u64>) -> Self {
        Self {
            created: chrono::Utc::now().to_rfc3339(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash(config_text),
            seed,
            dataset_fingerprint: dataset_fingerprint.map(|f| format!("{f:016x}")),
            git_revision: git_revision(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        Ok(std::fs::write(path, text)?)
    }
}

/// Creates and returns `base/<timestamp>-<hash prefix>`, the per-run
/// output directory.
pub fn make_run_dir(base: impl AsRef<Path>, config_text: &str) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    let dir = base
        .as_ref()
        .join(format!("{stamp}-{}", &config_hash(config_text)[..8]));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
