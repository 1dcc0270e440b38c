use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const SUBDIRS: [&str; 4] = ["datasets", "checkpoints", "logs", "reports"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub sha256: String,
    pub bytes: u64,
    /// Stage that last wrote the file.
    pub stage: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seed: u64,
    /// Unix seconds at stage start.
    pub started_at: u64,
    pub wall_time_s: f64,
    pub config_sha256: String,
    pub outputs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub ilflow: String,
    pub manifest: u32,
    pub dataset_format: u32,
    pub flow_sidecar: u32,
    pub agent_sidecar: u32,
}

impl Versions {
    pub fn current() -> Self {
        Self {
            ilflow: env!("CARGO_PKG_VERSION").into(),
            manifest: MANIFEST_VERSION,
            dataset_format: crate::data::DATASET_FORMAT_VERSION,
            flow_sidecar: crate::flow::model::SIDECAR_VERSION,
            agent_sidecar: crate::policy::agent::AGENT_SIDECAR_VERSION,
        }
    }
}

/// `manifest.json` at the root of a run directory. Paths are relative to the
/// run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub versions: Versions,
    /// Configuration of the most recent stage.
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    /// Named artifacts (for example `flow`) mapped to their paths.
    pub artifacts: BTreeMap<String, String>,
    pub files: BTreeMap<String, FileEntry>,
    pub stages: Vec<StageRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn new(run_id: &str, config: &RunConfig) -> Self {
        Self {
            run_id: run_id.into(),
            versions: Versions::current(),
            config: config.clone(),
            seeds: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            files: BTreeMap::new(),
            stages: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(&std::fs::read(path)?)?;
        if m.versions.manifest != MANIFEST_VERSION {
            return Err(Error::Format(format!("manifest version {}", m.versions.manifest)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Path of a named artifact, if a stage has produced it.
    pub fn artifact(&self, name: &str) -> Option<&str> {
        self.artifacts.get(name).map(String::as_str)
    }

    /// Recomputes the hash of every listed file under `root` and reports the
    /// ones that are missing or changed.
    pub fn verify_files(&self, root: &Path) -> Vec<String> {
        self.files
            .iter()
            .filter(|(rel, entry)| sha256_file(&root.join(rel)).map_or(true, |h| h != entry.sha256))
            .map(|(rel, _)| rel.clone())
            .collect()
    }
}

/// Exclusive writer lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Contract(format!(
                "run directory {} is locked by another stage (remove {} if no stage is running)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
