// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-command manifests recording the config, inputs and outputs by hash.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct FileRecord {
    /// Relative to the run directory.
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: &'static str,
    pub schema_version: u32,
    pub seed: u64,
    pub config_sha256: String,
    pub config: RunConfig,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn record(root: &Path, path: &Path) -> anyhow::Result<FileRecord> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(FileRecord {
        path: path.strip_prefix(root).unwrap_or(path).to_path_buf(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

/// Collects the files a command read and wrote, then writes
/// `manifest_<command>.json` into the run directory.
pub struct Recorder {
    root: PathBuf,
    command: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(root: &Path, command: &str) -> Self {
        Self {
            root: root.to_path_buf(),
            command: command.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `bytes` to `path` and records it as an output.
    pub fn write(&mut self, path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.output(path);
        Ok(())
    }

    pub fn finish(self, config: &RunConfig) -> anyhow::Result<PathBuf> {
        let config_json = serde_json::to_vec(config)?;
        let manifest = Manifest {
            command: self.command.clone(),
            tool_version: env!("CARGO_PKG_VERSION"),
            schema_version: config.schema_version,
            seed: config.seed,
            config_sha256: sha256_hex(&config_json),
            config: config.clone(),
            inputs: self
                .inputs
                .iter()
                .map(|p| record(&self.root, p))
                .collect::<anyhow::Result<_>>()?,
            outputs: self
                .outputs
                .iter()
                .map(|p| record(&self.root, p))
                .collect::<anyhow::Result<_>>()?,
        };
        let path = self.root.join(format!("manifest_{}.json", self.command.replace('-', "_")));
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
