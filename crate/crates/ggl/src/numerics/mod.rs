//! Dense linear algebra and deterministic randomness.
//!
//! Analysis-grade kernels only: everything here is f64, pure, and free of
//! external linear-algebra backends. The training loop has its own f32 path
//! in the model module; checkpoints are widened to f64 before anything in
//! this module touches them.

pub mod eigen;
pub mod matrix;
pub mod rng;
pub mod svd;

pub use eigen::{extreme_eigenvalue, jacobi_eigen_symmetric, EigenEstimate, ExtremeMode};
pub use matrix::{commutator_norm, dot, norm, DenseMatrix};
pub use rng::SeededRng;
pub use svd::{thin_svd, SvdResult};
