use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Pipeline stages in execution order.
pub const STAGES: [&str; 10] = ["data", "train", "eval", "extract", "intercept", "dispute", "cluster", "triage", "retrain", "metrics"];

/// The stage each stage depends on directly.
pub fn upstream(stage: &str) -> Option<&'static str> {
    let pos = STAGES.iter().position(|s| *s == stage)?;
    match stage {
        // both only need the trained model and data
        "extract" => Some("train"),
        _ if pos == 0 => None,
        _ => Some(STAGES[pos - 1]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageState {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub state: StageState,
    /// Digest of the stage's configuration and upstream artifacts.
    pub input_digest: String,
    /// Artifact file name to content digest.
    pub artifacts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub run_id: String,
    #[serde(default)]
    pub bias: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Snapshot of the configuration last used on this run.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(run_id: &str) -> Self {
        Self { manifest_version: MANIFEST_VERSION, run_id: run_id.into(), bias: None, seed: None, config: None, stages: BTreeMap::new() }
    }

    pub fn is_done(&self, stage: &str) -> bool {
        self.stages.get(stage).is_some_and(|s| s.state == StageState::Done)
    }

    pub fn artifact_digest(&self, stage: &str, name: &str) -> Option<&str> {
        self.stages.get(stage)?.artifacts.get(name).map(String::as_str)
    }
}

/// Writes via a temporary sibling and rename so readers never see a
/// partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().ok_or_else(|| anyhow!("{} has no parent directory", path.display()))?;
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("replacing {}", path.display()))?;
    Ok(())
}

/// Directory tree with one sub-directory per run.
#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("runs")).with_context(|| format!("creating store at {}", root.display()))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    pub fn artifact_path(&self, run_id: &str, name: &str) -> PathBuf {
        self.run_dir(run_id).join(name)
    }

    fn check_run_id(run_id: &str) -> Result<()> {
        let ok = !run_id.is_empty() && run_id.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c)) && !run_id.starts_with('.');
        if !ok {
            bail!("invalid run id {run_id:?}");
        }
        Ok(())
    }

    /// Run ids with a manifest, sorted.
    pub fn list_runs(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("runs"))? {
            let entry = entry?;
            if entry.path().join(MANIFEST_FILE).is_file() {
                if let Some(name) = entry.file_name().to_str() {
                    out.push(name.to_string());
                }
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn has_run(&self, run_id: &str) -> bool {
        Self::check_run_id(run_id).is_ok() && self.artifact_path(run_id, MANIFEST_FILE).is_file()
    }

    /// Existing manifest, or a fresh one when the run is new.
    pub fn load_or_create(&self, run_id: &str) -> Result<RunManifest> {
        Self::check_run_id(run_id)?;
        if self.has_run(run_id) {
            self.load_manifest(run_id)
        } else {
            Ok(RunManifest::new(run_id))
        }
    }

    pub fn load_manifest(&self, run_id: &str) -> Result<RunManifest> {
        Self::check_run_id(run_id)?;
        let path = self.artifact_path(run_id, MANIFEST_FILE);
        let bytes = fs::read(&path).with_context(|| format!("run {run_id} not found"))?;
        let m: RunManifest = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
        if m.manifest_version != MANIFEST_VERSION {
            bail!("run {run_id}: unsupported manifest version {}", m.manifest_version);
        }
        Ok(m)
    }

    pub fn save_manifest(&self, manifest: &RunManifest) -> Result<()> {
        Self::check_run_id(&manifest.run_id)?;
        let mut bytes = serde_json::to_vec_pretty(manifest)?;
        bytes.push(b'\n');
        atomic_write(&self.artifact_path(&manifest.run_id, MANIFEST_FILE), &bytes)
    }

    /// Writes an artifact and returns its digest.
    pub fn write_artifact(&self, run_id: &str, name: &str, bytes: &[u8]) -> Result<String> {
        Self::check_run_id(run_id)?;
        atomic_write(&self.artifact_path(run_id, name), bytes)?;
        Ok(sha256_hex(bytes))
    }

    pub fn write_json<T: Serialize>(&self, run_id: &str, name: &str, value: &T) -> Result<String> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_artifact(run_id, name, &bytes)
    }

    /// Digest of an artifact as it is on disk.
    pub fn file_digest(&self, run_id: &str, name: &str) -> Result<String> {
        Ok(sha256_hex(&fs::read(self.artifact_path(run_id, name))?))
    }

    /// Reads an artifact recorded by `stage`, checking its digest.
    pub fn read_verified(&self, manifest: &RunManifest, stage: &str, name: &str) -> Result<Vec<u8>> {
        let expected = manifest
            .artifact_digest(stage, name)
            .ok_or_else(|| anyhow!("run {}: stage {stage} has no artifact {name}", manifest.run_id))?;
        let bytes = fs::read(self.artifact_path(&manifest.run_id, name)).with_context(|| format!("run {}: reading {name}", manifest.run_id))?;
        let actual = sha256_hex(&bytes);
        if actual != expected {
            bail!("run {}: artifact {name} digest mismatch (manifest {expected}, file {actual})", manifest.run_id);
        }
        Ok(bytes)
    }

    pub fn read_json<T: DeserializeOwned>(&self, manifest: &RunManifest, stage: &str, name: &str) -> Result<T> {
        let bytes = self.read_verified(manifest, stage, name)?;
        serde_json::from_slice(&bytes).with_context(|| format!("run {}: parsing {name}", manifest.run_id))
    }

    /// Whether `stage` is done with this input digest and every artifact
    /// still matches its recorded digest.
    pub fn stage_current(&self, manifest: &RunManifest, stage: &str, input_digest: &str) -> bool {
        let Some(rec) = manifest.stages.get(stage) else { return false };
        rec.state == StageState::Done
            && rec.input_digest == input_digest
            && rec.artifacts.iter().all(|(name, d)| self.file_digest(&manifest.run_id, name).is_ok_and(|a| &a == d))
    }
}
