//! The shared-trunk Transformer: configuration, flat parameter layout,
//! initialization, forward/backward, and evaluation.

pub mod config;
pub mod layout;
pub mod net;
pub mod params;
pub mod real;

pub use config::{ModelConfig, LN_EPS};
pub use layout::{InitKind, ParamLayout, SegmentInfo};
pub use net::{argmax_lowest, EvalStats, Model, Workspace};
pub use params::ParamVector;
pub use real::Real;
