//! Output directories: CSV tables stamped with the config hash, and a
//! manifest that is the only place timestamps appear.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Result, RunConfig};

/// Builds a CSV whose last column is the config hash.
pub struct Csv {
    hash: String,
    text: String,
}

impl Csv {
    pub fn new(header: &str, cfg: &RunConfig) -> Self {
        Self {
            hash: cfg.hash(),
            text: format!("{header},config_hash\n"),
        }
    }

    pub fn row(&mut self, fields: &str) {
        self.text.push_str(fields);
        self.text.push(',');
        self.text.push_str(&self.hash);
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub created_unix: u64,
    /// File name to SHA-256 of its contents.
    pub files: BTreeMap<String, String>,
    /// Perturbation ids that entered each training path.
    pub id_audit: BTreeMap<String, Vec<usize>>,
    pub holdout: Vec<usize>,
}

/// Single writer for one output directory.
pub struct OutDir {
    pub path: PathBuf,
    manifest: Manifest,
}

impl OutDir {
    pub fn create(cfg: &RunConfig, command: &str) -> Result<Self> {
        fs::create_dir_all(&cfg.out)?;
        let created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(Self {
            path: cfg.out.clone(),
            manifest: Manifest {
                command: command.to_string(),
                config_hash: cfg.hash(),
                seed: cfg.seed,
                created_unix,
                files: BTreeMap::new(),
                id_audit: BTreeMap::new(),
                holdout: cfg.screen.holdout.clone(),
            },
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.file(name);
        fs::write(&path, bytes)?;
        self.manifest.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn audit(&mut self, path: &str, ids: Vec<usize>) {
        self.manifest.id_audit.insert(path.to_string(), ids);
    }

    /// Writes `manifest_<command>.json`, so commands sharing a directory
    /// keep their own records.
    pub fn finish(self) -> Result<PathBuf> {
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serialises");
        fs::write(self.path.join(manifest_name(&self.manifest.command)), json)?;
        Ok(self.path)
    }
}

pub fn manifest_name(command: &str) -> String {
    format!("manifest_{command}.json")
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| crate::CliError::Data(format!("cannot read {}: {e}", path.display())))
}
