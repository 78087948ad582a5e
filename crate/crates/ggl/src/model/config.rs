//! Architecture hyperparameters.

use crate::data::TaskKind;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub vocab: usize,
    pub positions: usize,
    /// Task order fixes head order in the parameter layout.
    pub tasks: Vec<TaskKind>,
}

impl ModelConfig {
    /// The fixed architecture used throughout: 2-layer pre-norm encoder,
    /// d_model 128, 4 heads, d_ff 256, vocab 97, sequence length 2.
    pub fn standard(tasks: Vec<TaskKind>) -> Self {
        ModelConfig {
            d_model: 128,
            heads: 4,
            d_ff: 256,
            layers: 2,
            vocab: 97,
            positions: 2,
            tasks,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::config("at least one layer required"));
        }
        if self.vocab < 2 {
            return Err(Error::config("vocab must be at least 2"));
        }
        if self.positions != 2 {
            return Err(Error::config("sequence length is fixed at 2 tokens"));
        }
        if self.tasks.is_empty() {
            return Err(Error::config("at least one task required"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].contains(t) {
                return Err(Error::config(format!("duplicate task '{t}'")));
            }
        }
        Ok(())
    }

    pub fn task_index(&self, task: TaskKind) -> Option<usize> {
        self.tasks.iter().position(|&t| t == task)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_config_validates() {
        let c = ModelConfig::standard(vec![TaskKind::Add, TaskKind::Mul]);
        c.validate().unwrap();
        assert_eq!(c.head_dim(), 32);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::standard(vec![TaskKind::Add]);
        c.heads = 3;
        assert!(c.validate().is_err());

        let c = ModelConfig::standard(vec![]);
        assert!(c.validate().is_err());

        let c = ModelConfig::standard(vec![TaskKind::Add, TaskKind::Add]);
        assert!(c.validate().is_err());
    }
}
