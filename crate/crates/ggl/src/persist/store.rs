//! On-disk run store.
//!
//! Layout under the store root (env `GGL_STORE`, else `./store`):
//!   <run_id>/config.toml      frozen run configuration
//!   <run_id>/manifest.toml    status, last step, grok summary
//!   <run_id>/metrics.csv      eval and inline-defect stream
//!   <run_id>/checkpoints/step_NNNNNNNN.ggl
//!   <run_id>/resume/state_NNNNNNNN.gglo
//!   <run_id>/analysis/        derived tables, bases, figures

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::persist::metrics::{read_metrics, MetricsRow};
use crate::run::RunConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const STORE_ENV: &str = "GGL_STORE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrokSummary {
    pub task: TaskKind,
    /// First evaluation step with test accuracy at or above 0.90.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grok_step: Option<u64>,
    /// Whether three consecutive evaluations reached 0.98.
    pub confirmed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confirm_step: Option<u64>,
    pub final_test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub run_id: String,
    pub status: RunStatus,
    pub code_version: String,
    pub layout_hash: String,
    pub param_count: u64,
    pub last_step: u64,
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grok: Vec<GrokSummary>,
    pub run: RunConfig,
    pub model: crate::model::ModelConfig,
}

pub struct RunRecord {
    pub manifest: RunManifest,
    /// Checkpoint steps, ascending.
    pub checkpoint_steps: Vec<u64>,
    pub metrics: Vec<MetricsRow>,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Store { root })
    }

    /// Resolves the store root from the environment, falling back to a
    /// `store` directory under the working directory.
    pub fn open_default() -> Result<Self> {
        match std::env::var_os(STORE_ENV) {
            Some(path) if !path.is_empty() => Store::open(PathBuf::from(path)),
            _ => Store::open("store"),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }
    pub fn config_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("config.toml")
    }
    pub fn manifest_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("manifest.toml")
    }
    pub fn metrics_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("metrics.csv")
    }
    pub fn checkpoints_dir(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("checkpoints")
    }
    pub fn resume_dir(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("resume")
    }
    pub fn analysis_dir(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("analysis")
    }
    pub fn checkpoint_path(&self, run_id: &str, step: u64) -> PathBuf {
        self.checkpoints_dir(run_id).join(format!("step_{step:08}.ggl"))
    }
    pub fn resume_path(&self, run_id: &str, step: u64) -> PathBuf {
        self.resume_dir(run_id).join(format!("state_{step:08}.gglo"))
    }

    pub fn list_runs(&self) -> Result<Vec<String>> {
        let mut runs = Vec::new();
        for entry in std::fs::read_dir(&self.root)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let name = match entry.file_name().into_string() {
                Ok(n) => n,
                Err(_) => continue,
            };
            if entry.path().join("config.toml").exists() {
                runs.push(name);
            }
        }
        runs.sort();
        Ok(runs)
    }

    fn scan_steps(dir: &Path, prefix: &str, suffix: &str) -> Result<Vec<u64>> {
        let mut steps = Vec::new();
        if !dir.exists() {
            return Ok(steps);
        }
        for entry in std::fs::read_dir(dir)? {
            let name = entry?.file_name();
            let name = match name.to_str() {
                Some(n) => n,
                None => continue,
            };
            if let Some(mid) = name.strip_prefix(prefix).and_then(|r| r.strip_suffix(suffix)) {
                if let Ok(step) = mid.parse::<u64>() {
                    steps.push(step);
                }
            }
        }
        steps.sort_unstable();
        Ok(steps)
    }

    pub fn checkpoint_index(&self, run_id: &str) -> Result<Vec<u64>> {
        Self::scan_steps(&self.checkpoints_dir(run_id), "step_", ".ggl")
    }

    pub fn resume_index(&self, run_id: &str) -> Result<Vec<u64>> {
        Self::scan_steps(&self.resume_dir(run_id), "state_", ".gglo")
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        let text = cfg.to_toml();
        super::checkpoint::atomic_write(&self.config_path(&cfg.run_id()), |w| {
            use std::io::Write;
            w.write_all(text.as_bytes())?;
            Ok(())
        })
    }

    pub fn read_config(&self, run_id: &str) -> Result<RunConfig> {
        let path = self.config_path(run_id);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<()> {
        let text = toml::to_string_pretty(manifest)
            .map_err(|e| Error::format(format!("manifest serialization: {e}")))?;
        super::checkpoint::atomic_write(&self.manifest_path(&manifest.run_id), |w| {
            use std::io::Write;
            w.write_all(text.as_bytes())?;
            Ok(())
        })
    }

    pub fn read_manifest(&self, run_id: &str) -> Result<RunManifest> {
        let path = self.manifest_path(run_id);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::data(format!("bad manifest: {e}")))
    }

    /// Everything an analysis needs to start: the manifest, the sorted
    /// checkpoint index, and the parsed metrics stream.
    pub fn load_run(&self, run_id: &str) -> Result<RunRecord> {
        if !self.run_dir(run_id).exists() {
            return Err(Error::data(format!(
                "run '{run_id}' not found under {}",
                self.root.display()
            )));
        }
        let manifest = self.read_manifest(run_id)?;
        let checkpoint_steps = self.checkpoint_index(run_id)?;
        let metrics = read_metrics(&self.metrics_path(run_id), &manifest.run.tasks)?;
        Ok(RunRecord { manifest, checkpoint_steps, metrics })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::run::preset;

    #[test]
    fn paths_and_indices() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let cfg = preset("dual-wd1").unwrap();
        let rid = cfg.run_id();
        store.write_config(&cfg).unwrap();
        assert_eq!(store.list_runs().unwrap(), vec![rid.clone()]);
        assert_eq!(store.read_config(&rid).unwrap(), cfg);

        std::fs::create_dir_all(store.checkpoints_dir(&rid)).unwrap();
        for step in [400u64, 0, 200] {
            std::fs::write(store.checkpoint_path(&rid, step), b"x").unwrap();
        }
        std::fs::write(store.checkpoints_dir(&rid).join("notes.txt"), b"x").unwrap();
        assert_eq!(store.checkpoint_index(&rid).unwrap(), vec![0, 200, 400]);
        assert_eq!(store.resume_index(&rid).unwrap(), Vec::<u64>::new());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let cfg = preset("dual-wd1").unwrap();
        let manifest = RunManifest {
            schema: 1,
            run_id: cfg.run_id(),
            status: RunStatus::Complete,
            code_version: "0.1.0".into(),
            layout_hash: "00ff".into(),
            param_count: 301_890,
            last_step: 25_000,
            wall_seconds: 1.5,
            abort_reason: None,
            grok: vec![GrokSummary {
                task: TaskKind::Add,
                grok_step: Some(13_100),
                confirmed: true,
                confirm_step: Some(13_600),
                final_test_accuracy: 1.0,
            }],
            model: crate::model::ModelConfig::standard(cfg.tasks.clone()),
            run: cfg,
        };
        store.write_manifest(&manifest).unwrap();
        assert_eq!(store.read_manifest(&manifest.run_id).unwrap(), manifest);
    }

    #[test]
    fn load_run_requires_existing_run() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(store.load_run("nope").is_err());
    }
}
