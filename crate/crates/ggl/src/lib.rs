//! ggl: a training-and-analysis laboratory for multi-task grokking on
//! modular arithmetic.
//!
//! The lab trains a small shared-trunk Transformer on several modular tasks
//! at once, stores dense checkpoint trajectories, and analyzes the geometry
//! of the training path: uncentered trajectory PCA and low-rank
//! reconstruction, commutator-defect integrability probes, finite-difference
//! Hessian eigenvalue probes, compression attacks on the learned solution,
//! orthogonal-gradient interventions, and attention-operator spectral
//! statistics.

pub mod analyze;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod persist;
pub mod run;
pub mod trainer;

pub use error::{Error, Result};
