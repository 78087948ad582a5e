//! Durable run state: binary checkpoints, optimizer snapshots, basis files,
//! the append-only metrics stream, and the store directory layout.

pub mod checkpoint;
pub mod metrics;
pub mod store;

pub use checkpoint::{
    atomic_write, load_basis, load_checkpoint, load_optimizer_state, save_basis,
    save_checkpoint, save_optimizer_state,
};
pub use metrics::{
    header_for, read_metrics, truncate_metrics_after, MetricsRow, MetricsWriter, RowKind,
};
pub use store::{GrokSummary, RunManifest, RunRecord, RunStatus, Store, STORE_ENV};
