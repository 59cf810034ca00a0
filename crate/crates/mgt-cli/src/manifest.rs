//! Per-run provenance record, written atomically when a command finishes.
//!
//! `run_hash` identifies the run's inputs and outputs: it digests the
//! command, the effective config, and the input/artifact file hashes, but
//! not the timestamps, so re-running with identical bytes reproduces it.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(to_hex(&Sha256::digest(&bytes)))
}

pub fn sha256_text(text: &str) -> String {
    to_hex(&Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub rng_seed: u64,
    pub config_hash: String,
    pub inputs: Vec<FileRecord>,
    pub artifacts: Vec<FileRecord>,
    pub run_hash: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub struct ManifestBuilder {
    command: String,
    rng_seed: u64,
    config_hash: String,
    inputs: Vec<FileRecord>,
    artifacts: Vec<FileRecord>,
    started_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl ManifestBuilder {
    pub fn new(command: &str, rng_seed: u64, config_json: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            rng_seed,
            config_hash: sha256_text(config_json),
            inputs: Vec::new(),
            artifacts: Vec::new(),
            started_unix_ms: now_ms(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileRecord {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) -> Result<()> {
        self.artifacts.push(FileRecord {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Write `manifest-<command>.json` under `out_dir` via a temp file plus
    /// rename.
    pub fn write(self, out_dir: &Path) -> Result<PathBuf> {
        let mut identity = Sha256::new();
        identity.update(self.command.as_bytes());
        identity.update(self.config_hash.as_bytes());
        identity.update(self.rng_seed.to_le_bytes());
        for rec in self.inputs.iter().chain(self.artifacts.iter()) {
            identity.update(rec.sha256.as_bytes());
        }
        let manifest = Manifest {
            run_hash: to_hex(&identity.finalize()),
            command: self.command,
            rng_seed: self.rng_seed,
            config_hash: self.config_hash,
            inputs: self.inputs,
            artifacts: self.artifacts,
            started_unix_ms: self.started_unix_ms,
            finished_unix_ms: now_ms(),
        };
        let path = out_dir.join(format!("manifest-{}.json", manifest.command));
        let tmp = out_dir.join(format!(".manifest-{}.json.tmp", manifest.command));
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, &path)
            .with_context(|| format!("renaming manifest into {}", path.display()))?;
        Ok(path)
    }
}
