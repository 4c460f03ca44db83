//! Run manifests: `<command>.manifest.toml` in the run directory, recording
//! inputs, outputs, seeds and settings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    command: String,
    version: String,
    seeds: BTreeMap<String, u64>,
    settings: BTreeMap<String, String>,
    inputs: BTreeMap<String, FileEntry>,
    outputs: BTreeMap<String, FileEntry>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash of a file, or of every file in a directory in name order.
fn sha256_path(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return sha256_file(path);
    }
    let mut names: Vec<PathBuf> = fs::read_dir(path)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    let mut hasher = Sha256::new();
    for name in names.iter().filter(|p| p.is_file()) {
        hasher.update(name.file_name().unwrap_or_default().as_encoded_bytes());
        hasher.update(sha256_file(name)?.as_bytes());
    }
    Ok(hex::encode(hasher.finalize()))
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: BTreeMap::new(),
            settings: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn setting(&mut self, name: &str, value: impl ToString) -> &mut Self {
        self.settings.insert(name.to_string(), value.to_string());
        self
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<&mut Self> {
        let entry = FileEntry {
            path: path.display().to_string(),
            sha256: sha256_path(path)?,
        };
        self.inputs.insert(name.to_string(), entry);
        Ok(self)
    }

    pub fn output(&mut self, name: &str, path: &Path) -> Result<&mut Self> {
        let entry = FileEntry {
            path: path.display().to_string(),
            sha256: sha256_path(path)?,
        };
        self.outputs.insert(name.to_string(), entry);
        Ok(self)
    }

    pub fn write(&self, run_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
        let path = run_dir.join(format!("{}.manifest.toml", self.command));
        fs::write(&path, toml::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
