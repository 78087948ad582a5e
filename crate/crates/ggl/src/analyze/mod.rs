//! Post-hoc geometry analyses over stored runs: trajectory decompositions,
//! update-commutator measurements, curvature probes, attention spectra, and
//! solution compressibility.

pub mod compress;
pub mod defect;
pub mod landscape;
pub(crate) mod probes;
pub mod spectral;
pub mod trajectory;
