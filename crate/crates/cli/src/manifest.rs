//! Per-stage manifests: input/output hashes, seed, timings. Manifests
//! chain the pipeline together so a later stage can refuse inputs that
//! were not produced by the recorded earlier runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sgcap_core::error::{Error, Result};
use sgcap_core::util::hash_file;

#[derive(Debug, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub seed: u64,
    pub started_unix: u64,
    pub duration_ms: u64,
    /// file name → fnv1a-64 hash, hex
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub struct StageRun {
    stage: String,
    seed: u64,
    started: Instant,
    started_unix: u64,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl StageRun {
    pub fn begin(stage: &str, seed: u64) -> Self {
        Self {
            stage: stage.to_string(),
            seed,
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(display_name(path), format!("{:016x}", hash_file(path)?));
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs
            .insert(display_name(path), format!("{:016x}", hash_file(path)?));
        Ok(())
    }

    pub fn finish(self, out_dir: &Path) -> Result<()> {
        let manifest = StageManifest {
            stage: self.stage.clone(),
            seed: self.seed,
            started_unix: self.started_unix,
            duration_ms: self.started.elapsed().as_millis() as u64,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let path = out_dir.join(format!("{}.manifest.json", self.stage));
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(path, json)?;
        Ok(())
    }
}

fn display_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn load_manifest(out_dir: &Path, stage: &str) -> Result<StageManifest> {
    let path = out_dir.join(format!("{stage}.manifest.json"));
    let text = std::fs::read_to_string(&path).map_err(|_| {
        Error::Data(format!(
            "missing manifest for stage '{stage}'; run `sgcap {stage}` first"
        ))
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("manifest for '{stage}': {e}")))
}

/// Recompute the hash of every output recorded by the listed stages and
/// refuse the chain when any file changed since its producing run.
pub fn verify_chain(out_dir: &Path, stages: &[&str]) -> Result<()> {
    for stage in stages {
        let manifest = load_manifest(out_dir, stage)?;
        for (name, recorded) in &manifest.outputs {
            let path = resolve_output(out_dir, name);
            let current = format!(
                "{:016x}",
                hash_file(&path).map_err(|_| Error::Data(format!(
                    "stage '{stage}' recorded output {name}, but the file is unreadable"
                )))?
            );
            if &current != recorded {
                return Err(Error::Data(format!(
                    "{name} no longer matches the hash recorded by stage '{stage}'; rerun `sgcap {stage}`"
                )));
            }
        }
    }
    Ok(())
}

fn resolve_output(out_dir: &Path, name: &str) -> PathBuf {
    out_dir.join(name)
}
