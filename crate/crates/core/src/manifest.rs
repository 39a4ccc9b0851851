//! Run manifests: every command that produces artifacts writes a manifest
//! listing each output file with its content hash, so a run can be audited
//! and a rerun compared byte-for-byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::atomic_write;
use crate::{Error, Result};

pub const MANIFEST_NAME: &str = "run_manifest.json";

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ArtifactEntry {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub seeds: BTreeMap<String, u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<ArtifactEntry>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, config_hash: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: BTreeMap::new(),
            started_unix: now_unix(),
            finished_unix: 0,
            artifacts: Vec::new(),
        }
    }

    pub fn record_seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    /// Hash and register one produced file. `root` is the directory the
    /// manifest will live in; `path` must point inside it. A bare relative
    /// path with root `.` (e.g. `out.csv` in the working directory) counts
    /// as inside.
    pub fn add_artifact(&mut self, root: &Path, path: &Path) -> Result<()> {
        let rel = path
            .strip_prefix(root)
            .ok()
            .or_else(|| (root == Path::new(".") && path.is_relative()).then_some(path))
            .ok_or_else(|| {
                Error::Io(std::io::Error::other(format!(
                    "artifact {} is outside manifest root {}",
                    path.display(),
                    root.display()
                )))
            })?
            .to_string_lossy()
            .into_owned();
        let sha256 = file_sha256(path)?;
        let bytes = std::fs::metadata(path)?.len();
        self.artifacts.push(ArtifactEntry {
            path: rel,
            sha256,
            bytes,
        });
        Ok(())
    }

    /// Stamp the end time and write the manifest into `root`.
    pub fn finish(self, root: &Path) -> Result<PathBuf> {
        let path = root.join(MANIFEST_NAME);
        self.finish_to(&path)
    }

    /// Stamp the end time and write the manifest to an explicit path.
    /// Artifact paths inside stay relative to whatever root they were
    /// added under.
    pub fn finish_to(mut self, path: &Path) -> Result<PathBuf> {
        self.finished_unix = now_unix();
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        atomic_write(path, serde_json::to_string_pretty(&self)?.as_bytes())?;
        Ok(path.to_path_buf())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Re-hash every listed artifact under `root` and compare.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for a in &self.artifacts {
            let p = root.join(&a.path);
            if !p.is_file() {
                return Err(Error::Verify(format!("missing artifact {}", a.path)));
            }
            let h = file_sha256(&p)?;
            if h != a.sha256 {
                return Err(Error::Verify(format!(
                    "artifact {} hash mismatch: manifest {}, disk {h}",
                    a.path, a.sha256
                )));
            }
        }
        Ok(())
    }
}
