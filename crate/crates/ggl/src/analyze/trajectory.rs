//! Trajectory geometry: principal components of parameter displacement,
//! rank-k reconstruction of the final solution, and the frozen direction
//! bases used by gradient interventions.
//!
//! All statistics are computed on displacements delta_t = theta_t - theta_0
//! without centering, so the first component captures the dominant direction
//! of travel rather than variance about a mean.

use crate::data::{full_dataset, split, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamVector, Workspace};
use crate::numerics::{jacobi_eigen_symmetric, thin_svd, DenseMatrix};
use crate::persist::{load_basis, load_checkpoint, save_basis, Store};
use std::path::PathBuf;
use std::sync::Arc;

/// Checkpoint subsampling cap: at most this many displacement rows enter the
/// decomposition, evenly spaced and always including the last checkpoint.
pub const DEFAULT_MAX_ROWS: usize = 100;

pub struct TrajectoryData {
    pub config: ModelConfig,
    pub layout: Arc<crate::model::ParamLayout>,
    /// Steps of the rows of `deltas`, ascending, final checkpoint last.
    pub steps: Vec<u64>,
    pub theta0: Vec<f64>,
    /// steps.len() x P displacement matrix.
    pub deltas: DenseMatrix,
}

/// Evenly spaced index subsample of `0..n` keeping both endpoints.
pub fn subsample_indices(n: usize, max_rows: usize) -> Vec<usize> {
    assert!(max_rows >= 2);
    if n <= max_rows {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..max_rows)
        .map(|i| (i as f64 * (n - 1) as f64 / (max_rows - 1) as f64).round() as usize)
        .collect();
    idx.dedup();
    idx
}

pub fn load_trajectory(store: &Store, run_id: &str, max_rows: usize) -> Result<TrajectoryData> {
    let manifest = store.read_manifest(run_id)?;
    let config = manifest.model.clone();
    let model = Model::new(config.clone())?;
    let all_steps = store.checkpoint_index(run_id)?;
    if all_steps.len() < 2 {
        return Err(Error::data(format!(
            "run '{run_id}' has {} checkpoints; trajectory analysis needs at least 2",
            all_steps.len()
        )));
    }
    if all_steps[0] != 0 {
        return Err(Error::data(format!(
            "run '{run_id}' is missing the step-0 checkpoint"
        )));
    }
    let (_, init) = load_checkpoint::<f32>(&store.checkpoint_path(run_id, 0), &model.layout)?;
    let theta0: Vec<f64> = init.values.iter().map(|&x| x as f64).collect();

    let later = &all_steps[1..];
    let picked = subsample_indices(later.len(), max_rows);
    let steps: Vec<u64> = picked.iter().map(|&i| later[i]).collect();

    let p = model.layout.total();
    let mut deltas = DenseMatrix::zeros(steps.len(), p);
    for (r, &step) in steps.iter().enumerate() {
        let (_, ck) = load_checkpoint::<f32>(&store.checkpoint_path(run_id, step), &model.layout)?;
        let row = deltas.row_mut(r);
        for i in 0..p {
            row[i] = ck.values[i] as f64 - theta0[i];
        }
    }
    Ok(TrajectoryData { config, layout: model.layout, steps, theta0, deltas })
}

pub struct TrajectoryPca {
    pub steps: Vec<u64>,
    pub singular_values: Vec<f64>,
    /// Fraction of total squared displacement energy per component.
    pub explained: Vec<f64>,
    /// First k principal directions, orthonormal, each of length P.
    pub components: Vec<Vec<f64>>,
}

pub fn pca(data: &TrajectoryData, k_keep: usize) -> Result<TrajectoryPca> {
    let svd = thin_svd(&data.deltas)?;
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let explained = svd
        .singular_values
        .iter()
        .map(|s| if total > 0.0 { s * s / total } else { 0.0 })
        .collect();
    let k = k_keep.min(svd.singular_values.len());
    let p = data.deltas.cols();
    let components = (0..k)
        .map(|j| (0..p).map(|i| svd.right_vectors.get(i, j)).collect())
        .collect();
    Ok(TrajectoryPca {
        steps: data.steps.clone(),
        singular_values: svd.singular_values,
        explained,
        components,
    })
}

/// Gram matrix of the displacement rows; its eigenvalues are the squared
/// singular values, which is all the scalar spectra need.
fn displacement_gram(data: &TrajectoryData) -> DenseMatrix {
    let m = data.deltas.rows();
    let mut g = DenseMatrix::zeros(m, m);
    for i in 0..m {
        let ri = data.deltas.row(i);
        for j in i..m {
            let v = crate::numerics::dot(ri, data.deltas.row(j));
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    g
}

fn leading_fraction(eigs: &[f64]) -> f64 {
    let total: f64 = eigs.iter().map(|&e| e.max(0.0)).sum();
    if total <= 0.0 {
        return 0.0;
    }
    eigs.iter().cloned().fold(f64::MIN, f64::max).max(0.0) / total
}

/// Fraction of displacement energy on the first component when the
/// decomposition sees only the trajectory up to each step: one point per
/// prefix of at least two rows.
pub fn expanding_pc1(data: &TrajectoryData) -> Result<Vec<(u64, f64)>> {
    let gram = displacement_gram(data);
    let m = gram.rows();
    let mut out = Vec::new();
    for prefix in 2..=m {
        let mut sub = DenseMatrix::zeros(prefix, prefix);
        for i in 0..prefix {
            for j in 0..prefix {
                sub.set(i, j, gram.get(i, j));
            }
        }
        let eigs = jacobi_eigen_symmetric(&sub).0;
        out.push((data.steps[prefix - 1], leading_fraction(&eigs)));
    }
    Ok(out)
}

fn basis_path(store: &Store, run_id: &str, rank: usize) -> PathBuf {
    store.analysis_dir(run_id).join(format!("basis_k{rank}.gglb"))
}

/// Loads the cached principal-direction basis of a run, computing and saving
/// it on first use. Columns are orthonormal to well below 1e-8.
pub fn ensure_basis(store: &Store, run_id: &str, rank: usize) -> Result<Vec<Vec<f64>>> {
    let path = basis_path(store, run_id, rank);
    if path.exists() {
        return load_basis(&path);
    }
    let data = load_trajectory(store, run_id, DEFAULT_MAX_ROWS)?;
    if data.steps.len() < rank {
        return Err(Error::data(format!(
            "run '{run_id}' has only {} usable checkpoints, cannot extract a rank-{rank} basis",
            data.steps.len()
        )));
    }
    let pca = pca(&data, rank)?;
    save_basis(&path, &pca.components)?;
    Ok(pca.components)
}

pub struct ReconstructionPoint {
    pub k: usize,
    /// Test accuracy per task at this reconstruction rank.
    pub test_accuracy: Vec<f64>,
    /// Test loss per task.
    pub test_loss: Vec<f64>,
}

/// Rebuilds theta_0 + sum_{j<k} (v_j . delta_final) v_j for each requested k
/// and scores it on the held-out split. `ks` must be ascending.
pub fn reconstruction_curve(
    store: &Store,
    run_id: &str,
    ks: &[usize],
) -> Result<Vec<ReconstructionPoint>> {
    if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("reconstruction ranks must be ascending and non-empty"));
    }
    let data = load_trajectory(store, run_id, DEFAULT_MAX_ROWS)?;
    let manifest = store.read_manifest(run_id)?;
    let max_k = *ks.last().unwrap();
    let decomposition = pca(&data, max_k.min(data.steps.len()))?;
    if decomposition.components.len() < max_k {
        return Err(Error::data(format!(
            "trajectory supports at most rank {}, requested {max_k}",
            decomposition.components.len()
        )));
    }

    let model = Model::new(data.config.clone())?;
    let specs: Vec<TaskSpec> = data.config.tasks.iter().map(|&t| TaskSpec::new(t)).collect();
    let dataset = full_dataset(&specs);
    let holdout = split(&dataset, manifest.run.seed);
    let mut ws = Workspace::new();

    let p = data.layout.total();
    let final_delta = data.deltas.row(data.deltas.rows() - 1);
    let mut theta = ParamVector::<f64>::zeros(data.layout.clone());
    theta.values.copy_from_slice(&data.theta0);

    let mut out = Vec::with_capacity(ks.len());
    let mut next_component = 0usize;
    for &k in ks {
        while next_component < k {
            let v = &decomposition.components[next_component];
            let c = crate::numerics::dot(v, final_delta);
            for i in 0..p {
                theta.values[i] += c * v[i];
            }
            next_component += 1;
        }
        let stats = model.evaluate(&theta, &dataset, &holdout.test, &mut ws)?;
        out.push(ReconstructionPoint {
            k,
            test_accuracy: stats.accuracy,
            test_loss: stats.mean_loss,
        });
    }
    Ok(out)
}

/// Smallest scanned rank whose reconstruction clears `threshold` on every
/// task. Exact only when the scanned ranks are contiguous from 1.
pub fn find_kstar(points: &[ReconstructionPoint], threshold: f64) -> Option<usize> {
    points
        .iter()
        .find(|pt| pt.test_accuracy.iter().all(|&a| a > threshold))
        .map(|pt| pt.k)
}

/// Cosine similarity between the final displacement restricted to each pair
/// of task-head weight segments. Head segments have equal shapes, so the
/// slices align index-for-index.
pub fn head_cosines(data: &TrajectoryData) -> Vec<(String, String, f64)> {
    let final_delta = data.deltas.row(data.deltas.rows() - 1);
    let heads: Vec<&crate::model::SegmentInfo> = data
        .layout
        .segments
        .iter()
        .filter(|s| s.name.starts_with("heads.") && s.name.ends_with(".weight"))
        .collect();
    let mut out = Vec::new();
    for i in 0..heads.len() {
        for j in i + 1..heads.len() {
            let a = &final_delta[heads[i].range()];
            let b = &final_delta[heads[j].range()];
            let denom = crate::numerics::norm(a) * crate::numerics::norm(b);
            let cos = if denom > 0.0 { crate::numerics::dot(a, b) / denom } else { 0.0 };
            out.push((heads[i].name.clone(), heads[j].name.clone(), cos));
        }
    }
    out
}
