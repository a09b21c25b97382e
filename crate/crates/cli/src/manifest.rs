//! Run manifests and directory locking.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Written once per command into its output directory; records enough to
/// reproduce the run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub started_utc: String,
    pub finished_utc: String,
    pub artifacts: Vec<String>,
    pub version: String,
}

pub struct ManifestBuilder {
    command: Vec<String>,
    config_hash: String,
    seeds: BTreeMap<String, u64>,
    started_utc: String,
}

impl ManifestBuilder {
    pub fn start(config_bytes: &[u8]) -> Self {
        ManifestBuilder {
            command: std::env::args().collect(),
            config_hash: sha256_hex(config_bytes),
            seeds: BTreeMap::new(),
            started_utc: chrono::Utc::now().to_rfc3339(),
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn finish(self, dir: &Path, artifacts: Vec<String>) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            config_hash: self.config_hash,
            seeds: self.seeds,
            started_utc: self.started_utc,
            finished_utc: chrono::Utc::now().to_rfc3339(),
            artifacts,
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Exclusive-creation lock file; removed on drop. Prevents two writers in
/// one run directory.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "{} is locked by another writer (stale? remove {})",
                    dir.display(),
                    path.display()
                )
            }
            Err(e) => Err(e).with_context(|| format!("locking {}", dir.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
