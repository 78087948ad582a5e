//! Run configuration: hyperparameters, intervention specs, presets, and the
//! derived run identifier that names a run's directory in the store.

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterventionKind {
    /// Remove the component of each gradient lying in the frozen basis span.
    OrthoDelete,
    /// Control: remove the span of a random orthonormal basis of equal rank.
    RandomDelete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub kind: InterventionKind,
    /// Fraction of the in-span gradient component removed, in [0, 1].
    pub strength: f64,
    /// Run whose trajectory supplies the principal directions. Required for
    /// ortho-delete; random-delete draws its own basis from the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_run: Option<String>,
    /// Number of basis directions.
    pub rank: usize,
}

impl InterventionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) || !self.strength.is_finite() {
            return Err(Error::config(format!(
                "intervention strength {} outside [0, 1]",
                self.strength
            )));
        }
        if self.rank == 0 {
            return Err(Error::config("intervention rank must be positive"));
        }
        if self.kind == InterventionKind::OrthoDelete && self.basis_run.is_none() {
            return Err(Error::config("ortho-delete requires basis_run"));
        }
        Ok(())
    }

    fn id_fragment(&self) -> String {
        let tag = match self.kind {
            InterventionKind::OrthoDelete => "ortho",
            InterventionKind::RandomDelete => "rand",
        };
        format!("-{tag}{}", self.strength)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub tasks: Vec<TaskKind>,
    pub weight_decay: f64,
    pub seed: u64,
    pub max_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    /// Measure the two-batch update commutator every 100 steps during
    /// training (widened to f64) and stream it into metrics.csv.
    #[serde(default)]
    pub defect_inline: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervention: Option<InterventionSpec>,
}

/// Wrapper giving the config file its `[run]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFile {
    pub run: RunConfig,
}

impl RunConfig {
    pub fn new(tasks: Vec<TaskKind>, weight_decay: f64, seed: u64, max_steps: u64) -> Self {
        RunConfig {
            tasks,
            weight_decay,
            seed,
            max_steps,
            batch_size: 512,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            clip_norm: 1.0,
            eval_every: if max_steps <= 60_000 { 100 } else { 200 },
            checkpoint_every: 200,
            defect_inline: false,
            intervention: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ModelConfig::standard(self.tasks.clone()).validate()?;
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::config(format!(
                "weight decay {} must be finite and non-negative",
                self.weight_decay
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::config("eval_every and checkpoint_every must be positive"));
        }
        if let Some(iv) = &self.intervention {
            iv.validate()?;
        }
        Ok(())
    }

    /// Directory name under the store root. Derived from the distinguishing
    /// fields, so rerunning the same config reuses the same run directory.
    pub fn run_id(&self) -> String {
        let tasks = self
            .tasks
            .iter()
            .map(|t| t.id())
            .collect::<Vec<_>>()
            .join("+");
        let mut id = format!("{tasks}-wd{}-s{}", self.weight_decay, self.seed);
        if let Some(iv) = &self.intervention {
            id.push_str(&iv.id_fragment());
        }
        id
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(&ConfigFile { run: self.clone() })
            .expect("run config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ConfigFile =
            toml::from_str(text).map_err(|e| Error::config(format!("bad run config: {e}")))?;
        file.run.validate()?;
        Ok(file.run)
    }
}

pub const DUAL_TASKS: [TaskKind; 2] = [TaskKind::Add, TaskKind::Mul];
pub const TRI_TASKS: [TaskKind; 3] = [TaskKind::Add, TaskKind::Mul, TaskKind::SqSum];
pub const TRI_SUB_TASKS: [TaskKind; 3] = [TaskKind::Add, TaskKind::Mul, TaskKind::Sub];

/// Named starting points covering the standard experiment grid. Each returns
/// a complete config; callers typically override only the seed.
pub fn preset(name: &str) -> Result<RunConfig> {
    let cfg = match name {
        "dual-wd1" => RunConfig::new(DUAL_TASKS.to_vec(), 1.0, 42, 25_000),
        "dual-wd0.5" => RunConfig::new(DUAL_TASKS.to_vec(), 0.5, 42, 25_000),
        "dual-wd0" => RunConfig::new(DUAL_TASKS.to_vec(), 0.0, 42, 50_000),
        "tri-wd1" => RunConfig::new(TRI_TASKS.to_vec(), 1.0, 42, 35_000),
        "tri-wd0.5" => RunConfig::new(TRI_TASKS.to_vec(), 0.5, 42, 40_000),
        "tri-wd0" => RunConfig::new(TRI_TASKS.to_vec(), 0.0, 42, 35_000),
        "trisub-wd1" => RunConfig::new(TRI_SUB_TASKS.to_vec(), 1.0, 42, 40_000),
        other => {
            return Err(Error::config(format!(
                "unknown preset '{other}' (expected dual-wd1, dual-wd0.5, dual-wd0, \
                 tri-wd1, tri-wd0.5, tri-wd0, trisub-wd1)"
            )))
        }
    };
    Ok(cfg)
}

pub fn preset_names() -> &'static [&'static str] {
    &["dual-wd1", "dual-wd0.5", "dual-wd0", "tri-wd1", "tri-wd0.5", "tri-wd0", "trisub-wd1"]
}
