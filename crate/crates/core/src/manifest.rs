//! Run manifests: enough provenance to reproduce every output of a command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<FileDigest> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(FileDigest {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&data)),
            bytes: data.len() as u64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub command: String,
    pub tool_version: String,
    pub config_sha256: String,
    /// The full effective configuration.
    pub config: String,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Free-form results worth pinning (golden values, row counts).
    pub records: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig, seed: u64, jobs: Option<usize>) -> Manifest {
        Manifest {
            manifest_version: MANIFEST_VERSION,
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: config.hash(),
            config: config.to_toml(),
            seed,
            jobs,
            inputs: Vec::new(),
            outputs: Vec::new(),
            records: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn record(&mut self, key: &str, value: impl ToString) {
        self.records.insert(key.to_string(), value.to_string());
    }

    /// Writes `<dir>/<command>.manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.manifest.json", self.command));
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Output paths whose current content no longer matches the manifest.
    pub fn stale_outputs(&self) -> Vec<PathBuf> {
        self.outputs
            .iter()
            .filter(|d| FileDigest::of(&d.path).map_or(true, |now| now.sha256 != d.sha256))
            .map(|d| d.path.clone())
            .collect()
    }
}
