//! Compression attacks on a trained solution: how much of the displacement
//! theta_final - theta_init a run actually needs. Each attack builds a
//! modified parameter vector from (init, final) and evaluates it on the test
//! split; a solution is incompressible when every lossy variant collapses
//! while the lossless ones match the baseline.
//!
//! All transforms run in f64 on widened checkpoints, and the lossless
//! settings (full rank, keep everything, unit scale) reproduce the final
//! parameters bitwise.

use crate::data::{full_dataset, split, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{Model, ParamVector, Workspace};
use crate::numerics::thin_svd;
use crate::persist::{load_checkpoint, Store};
use std::io::Write;

/// One attack and its measured effect.
#[derive(Debug, Clone)]
pub struct CompressionOutcome {
    /// "svd_truncate" | "magnitude_prune" | "uniform_scale" | "module_revert".
    pub method: &'static str,
    /// Rank, keep fraction, scale, or segment name, rendered as text.
    pub parameter: String,
    /// Per-task test accuracy of the modified parameters.
    pub accuracy: Vec<f64>,
    /// ||modified delta||^2 / ||delta||^2. Truncation, pruning, and
    /// reversion keep this in [0, 1]; scaling reports s^2, which exceeds 1
    /// for s > 1.
    pub retained_energy: f64,
}

fn delta_energy(init: &[f64], theta: &[f64]) -> f64 {
    init.iter().zip(theta).map(|(a, b)| (b - a) * (b - a)).sum()
}

fn energy_fraction(init: &[f64], modified: &[f64], full: f64) -> f64 {
    if full == 0.0 {
        return 1.0;
    }
    delta_energy(init, modified) / full
}

/// Keeps the top-`rank` singular directions of every 2-D segment's
/// displacement. 1-D segments have no rank structure: their displacement
/// passes through whole for rank >= 1 and is dropped at rank 0. Segments
/// whose smaller dimension is at most `rank` are copied from `final_p`
/// exactly, so a full-rank truncation is the identity.
pub fn svd_truncate(
    init: &ParamVector<f64>,
    final_p: &ParamVector<f64>,
    rank: usize,
) -> Result<ParamVector<f64>> {
    let layout = init.layout().clone();
    let mut out = ParamVector::zeros(layout.clone());
    for seg in &layout.segments {
        let r = seg.range();
        let dst = &mut out.values[r.clone()];
        if !seg.is_matrix() {
            dst.copy_from_slice(if rank >= 1 { &final_p.values[r] } else { &init.values[r] });
            continue;
        }
        let (rows, cols) = (seg.shape[0], seg.shape[1]);
        if rank >= rows.min(cols) {
            dst.copy_from_slice(&final_p.values[r]);
            continue;
        }
        if rank == 0 {
            dst.copy_from_slice(&init.values[r]);
            continue;
        }
        let delta: Vec<f64> = init.values[r.clone()]
            .iter()
            .zip(&final_p.values[r.clone()])
            .map(|(a, b)| b - a)
            .collect();
        let svd = thin_svd(&crate::numerics::DenseMatrix::from_vec(rows, cols, delta))?;
        // Rank-r reconstruction: sum of sigma_j * u_j v_j^T over the top r.
        for i in 0..rows {
            for c in 0..cols {
                let mut acc = 0.0;
                for j in 0..rank {
                    acc += svd.singular_values[j]
                        * svd.left_vectors.get(i, j)
                        * svd.right_vectors.get(c, j);
                }
                dst[i * cols + c] = init.values[seg.offset + i * cols + c] + acc;
            }
        }
    }
    Ok(out)
}

/// Keeps the ceil(q * P) largest-magnitude entries of the displacement (one
/// global threshold) and returns the modified vector with the retained
/// energy fraction. Ties break toward the lower parameter index, so the kept
/// set is deterministic.
pub fn magnitude_prune(
    init: &ParamVector<f64>,
    final_p: &ParamVector<f64>,
    keep_fraction: f64,
) -> Result<(ParamVector<f64>, f64)> {
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(Error::data(format!(
            "keep fraction {keep_fraction} outside [0, 1]"
        )));
    }
    let p = init.len();
    let keep = (keep_fraction * p as f64).ceil() as usize;
    if keep == p {
        return Ok((final_p.clone(), 1.0));
    }
    let delta: Vec<f64> =
        init.values.iter().zip(&final_p.values).map(|(a, b)| b - a).collect();
    let mut order: Vec<u32> = (0..p as u32).collect();
    order.sort_by(|&i, &j| {
        delta[j as usize]
            .abs()
            .partial_cmp(&delta[i as usize].abs())
            .unwrap()
            .then(i.cmp(&j))
    });

    let mut out = ParamVector::zeros(init.layout().clone());
    out.values.copy_from_slice(&init.values);
    let mut kept_energy = 0.0;
    for &i in &order[..keep] {
        let i = i as usize;
        out.values[i] = final_p.values[i];
        kept_energy += delta[i] * delta[i];
    }
    let total: f64 = delta.iter().map(|d| d * d).sum();
    let fraction = if total == 0.0 { 1.0 } else { kept_energy / total };
    Ok((out, fraction))
}

/// theta_init + s * (theta_final - theta_init). Unit scale returns the final
/// parameters bitwise.
pub fn uniform_scale(
    init: &ParamVector<f64>,
    final_p: &ParamVector<f64>,
    s: f64,
) -> Result<ParamVector<f64>> {
    if !(s >= 0.0) {
        return Err(Error::data(format!("scale {s} must be non-negative")));
    }
    if s == 1.0 {
        return Ok(final_p.clone());
    }
    let mut out = ParamVector::zeros(init.layout().clone());
    for ((o, &a), &b) in out.values.iter_mut().zip(&init.values).zip(&final_p.values) {
        *o = a + s * (b - a);
    }
    Ok(out)
}

/// Final parameters with one named segment restored to its initial values.
pub fn module_revert(
    final_p: &ParamVector<f64>,
    init: &ParamVector<f64>,
    segment: &str,
) -> Result<ParamVector<f64>> {
    let layout = final_p.layout().clone();
    let seg = layout
        .find(segment)
        .ok_or_else(|| Error::data(format!("no segment named '{segment}'")))?;
    let mut out = final_p.clone();
    out.values[seg.range()].copy_from_slice(&init.values[seg.range()]);
    Ok(out)
}

/// The attack grid a store-level sweep runs.
#[derive(Debug, Clone)]
pub struct CompressionPlan {
    pub ranks: Vec<usize>,
    pub keep_fractions: Vec<f64>,
    pub scales: Vec<f64>,
    /// Segment names to revert one at a time.
    pub reverts: Vec<String>,
}

impl CompressionPlan {
    /// Ranks that cross the collapse threshold, the half-mass prune, the
    /// small scale perturbations around the unit-scale baseline, and one
    /// representative module reversion per kind (a value projection and the
    /// first task head).
    pub fn standard(tasks: &[crate::data::TaskKind]) -> Self {
        CompressionPlan {
            ranks: vec![64, 128],
            keep_fractions: vec![0.5],
            scales: vec![1.0, 0.95, 1.05],
            reverts: vec![
                "layer0.attn.wv".to_string(),
                format!("heads.{}.weight", tasks[0]),
            ],
        }
    }
}

/// Runs the plan against a stored run's (step 0, final) checkpoint pair and
/// writes analysis/compress.csv. Outcomes appear in plan order: truncations,
/// prunes, scales, reversions.
pub fn compression_attacks(
    store: &Store,
    run_id: &str,
    plan: &CompressionPlan,
) -> Result<Vec<CompressionOutcome>> {
    let manifest = store.read_manifest(run_id)?;
    let model = Model::new(manifest.model.clone())?;
    let steps = store.checkpoint_index(run_id)?;
    if steps.first() != Some(&0) || steps.len() < 2 {
        return Err(Error::data(format!(
            "run '{run_id}' needs a step-0 and a later checkpoint for compression attacks"
        )));
    }
    let widen = |step: u64| -> Result<ParamVector<f64>> {
        let (_, p) =
            load_checkpoint::<f32>(&store.checkpoint_path(run_id, step), &model.layout)?;
        let mut out = ParamVector::zeros(model.layout.clone());
        for (o, &v) in out.values.iter_mut().zip(&p.values) {
            *o = v as f64;
        }
        Ok(out)
    };
    let init = widen(0)?;
    let final_p = widen(*steps.last().unwrap())?;
    let full_energy = delta_energy(&init.values, &final_p.values);

    let specs: Vec<TaskSpec> = manifest.run.tasks.iter().map(|&t| TaskSpec::new(t)).collect();
    let dataset = full_dataset(&specs);
    let holdout = split(&dataset, manifest.run.seed);
    let mut ws = Workspace::new();
    let mut eval = |params: &ParamVector<f64>| -> Result<Vec<f64>> {
        Ok(model.evaluate(params, &dataset, &holdout.test, &mut ws)?.accuracy)
    };

    let mut outcomes = Vec::new();
    for &r in &plan.ranks {
        let params = svd_truncate(&init, &final_p, r)?;
        outcomes.push(CompressionOutcome {
            method: "svd_truncate",
            parameter: r.to_string(),
            accuracy: eval(&params)?,
            retained_energy: energy_fraction(&init.values, &params.values, full_energy),
        });
    }
    for &q in &plan.keep_fractions {
        let (params, energy) = magnitude_prune(&init, &final_p, q)?;
        outcomes.push(CompressionOutcome {
            method: "magnitude_prune",
            parameter: q.to_string(),
            accuracy: eval(&params)?,
            retained_energy: energy,
        });
    }
    for &s in &plan.scales {
        let params = uniform_scale(&init, &final_p, s)?;
        outcomes.push(CompressionOutcome {
            method: "uniform_scale",
            parameter: s.to_string(),
            accuracy: eval(&params)?,
            retained_energy: energy_fraction(&init.values, &params.values, full_energy),
        });
    }
    for name in &plan.reverts {
        let params = module_revert(&final_p, &init, name)?;
        outcomes.push(CompressionOutcome {
            method: "module_revert",
            parameter: name.clone(),
            accuracy: eval(&params)?,
            retained_energy: energy_fraction(&init.values, &params.values, full_energy),
        });
    }

    let mut header = String::from("method,parameter,retained_energy");
    for t in &manifest.run.tasks {
        header.push_str(&format!(",acc_{t}"));
    }
    let path = store.analysis_dir(run_id).join("compress.csv");
    crate::persist::atomic_write(&path, |w| {
        writeln!(w, "{header}")?;
        for o in &outcomes {
            let mut line =
                format!("{},{},{}", o.method, o.parameter, o.retained_energy);
            for a in &o.accuracy {
                line.push_str(&format!(",{a}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    })?;
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskKind;
    use crate::model::{InitKind, ModelConfig, ParamLayout, SegmentInfo};
    use crate::numerics::SeededRng;
    use std::sync::Arc;
    use crate::run::RunConfig;
    use crate::trainer::train_with_model;

    fn raw_layout(shapes: &[(&str, Vec<usize>)]) -> Arc<ParamLayout> {
        let mut offset = 0;
        let segments = shapes
            .iter()
            .map(|(name, shape)| {
                let seg = SegmentInfo {
                    name: name.to_string(),
                    offset,
                    shape: shape.clone(),
                    decayable: shape.len() == 2,
                    init: InitKind::Zero,
                };
                offset += seg.len();
                seg
            })
            .collect();
        ParamLayout::raw(segments).unwrap()
    }

    fn random_pair(layout: &Arc<ParamLayout>, seed: u64) -> (ParamVector<f64>, ParamVector<f64>) {
        let mut rng = SeededRng::new(seed, "compress-pair");
        let mut init = ParamVector::zeros(layout.clone());
        let mut fin = ParamVector::zeros(layout.clone());
        for v in &mut init.values {
            *v = rng.standard_normal();
        }
        for v in &mut fin.values {
            *v = rng.standard_normal();
        }
        (init, fin)
    }

    fn model_layout() -> Arc<ParamLayout> {
        ParamLayout::for_config(&ModelConfig {
            d_model: 8,
            heads: 2,
            d_ff: 16,
            layers: 1,
            vocab: 97,
            positions: 2,
            tasks: vec![TaskKind::Add, TaskKind::Mul],
        })
    }

    #[test]
    fn lossless_settings_reproduce_the_final_parameters_bitwise() {
        let layout = model_layout();
        let (init, fin) = random_pair(&layout, 3);
        // Rank 8 covers the smaller dimension of every segment here.
        let t = svd_truncate(&init, &fin, 8).unwrap();
        let (p, energy) = magnitude_prune(&init, &fin, 1.0).unwrap();
        let s = uniform_scale(&init, &fin, 1.0).unwrap();
        for got in [&t, &p, &s] {
            for (a, b) in got.values.iter().zip(&fin.values) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(energy, 1.0);
    }

    #[test]
    fn zeroed_settings_recover_the_initialization_bitwise() {
        let layout = model_layout();
        let (init, fin) = random_pair(&layout, 4);
        let t = svd_truncate(&init, &fin, 0).unwrap();
        let (p, energy) = magnitude_prune(&init, &fin, 0.0).unwrap();
        let s = uniform_scale(&init, &fin, 0.0).unwrap();
        for got in [&t, &p, &s] {
            for (a, b) in got.values.iter().zip(&init.values) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(energy, 0.0);
        assert!(uniform_scale(&init, &fin, -0.5).is_err());
        assert!(magnitude_prune(&init, &fin, 1.5).is_err());
    }

    #[test]
    fn truncation_matches_a_constructed_low_rank_displacement() {
        // Displacement built as sigma-weighted outer products of orthonormal
        // vectors: truncating to rank 2 must keep exactly the top two terms.
        let layout = raw_layout(&[("m", vec![6, 5])]);
        let u = crate::trainer::random_orthonormal_basis(6, 3, 11).unwrap();
        let v = crate::trainer::random_orthonormal_basis(5, 3, 12).unwrap();
        let sigma = [5.0, 3.0, 1.0];
        let mut init = ParamVector::zeros(layout.clone());
        let mut rng = SeededRng::new(9, "trunc-init");
        for x in &mut init.values {
            *x = rng.standard_normal();
        }
        let mut fin = init.clone();
        for (k, &s) in sigma.iter().enumerate() {
            for i in 0..6 {
                for j in 0..5 {
                    fin.values[i * 5 + j] += s * u[k][i] * v[k][j];
                }
            }
        }
        let got = svd_truncate(&init, &fin, 2).unwrap();
        let mut err = 0.0f64;
        for i in 0..6 {
            for j in 0..5 {
                let want = init.values[i * 5 + j]
                    + sigma[0] * u[0][i] * v[0][j]
                    + sigma[1] * u[1][i] * v[1][j];
                err = err.max((got.values[i * 5 + j] - want).abs());
            }
        }
        assert!(err < 1e-9, "max deviation {err}");

        // Retained energy of the rank-2 cut: (25 + 9) / (25 + 9 + 1).
        let frac = energy_fraction(
            &init.values,
            &got.values,
            delta_energy(&init.values, &fin.values),
        );
        assert!((frac - 34.0 / 35.0).abs() < 1e-9, "{frac}");
    }

    #[test]
    fn pruning_keeps_the_largest_entries_with_exact_energy_accounting() {
        let layout = raw_layout(&[("a", vec![4]), ("b", vec![4])]);
        let init = ParamVector::zeros(layout.clone());
        let mut fin = ParamVector::zeros(layout.clone());
        fin.values
            .copy_from_slice(&[3.0, -4.0, 1.0, 0.5, -2.0, 0.25, 5.0, -0.125]);
        // ceil(0.375 * 8) = 3: keep |5|, |-4|, |3|.
        let (got, energy) = magnitude_prune(&init, &fin, 0.375).unwrap();
        assert_eq!(got.values, vec![3.0, -4.0, 0.0, 0.0, 0.0, 0.0, 5.0, 0.0]);
        let total: f64 = fin.values.iter().map(|d| d * d).sum();
        let oracle = (25.0 + 16.0 + 9.0) / total;
        assert!((energy - oracle).abs() < 1e-12);

        // Equal magnitudes break toward the lower index.
        let mut tied = ParamVector::zeros(layout.clone());
        tied.values.copy_from_slice(&[1.0; 8]);
        let (got, _) = magnitude_prune(&init, &tied, 0.25).unwrap();
        assert_eq!(got.values, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn reverting_a_module_restores_exactly_that_segment() {
        let layout = raw_layout(&[("a", vec![2, 3]), ("b", vec![4])]);
        let (init, fin) = random_pair(&layout, 8);
        let got = module_revert(&fin, &init, "b").unwrap();
        assert_eq!(got.values[..6], fin.values[..6]);
        assert_eq!(got.values[6..], init.values[6..]);
        assert!(module_revert(&fin, &init, "nope").is_err());
    }

    #[test]
    fn attack_sweep_writes_the_outcome_table_for_a_stored_run() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let mut cfg = RunConfig::new(vec![TaskKind::Add, TaskKind::Mul], 1.0, 42, 20);
        cfg.batch_size = 128;
        cfg.eval_every = 10;
        cfg.checkpoint_every = 10;
        let model = ModelConfig {
            d_model: 8,
            heads: 2,
            d_ff: 16,
            layers: 1,
            vocab: 97,
            positions: 2,
            tasks: cfg.tasks.clone(),
        };
        let out = train_with_model(&store, &cfg, model).unwrap();

        let plan = CompressionPlan {
            ranks: vec![0, 8],
            keep_fractions: vec![0.5, 1.0],
            scales: vec![1.0, 0.95],
            reverts: vec!["heads.add.weight".to_string()],
        };
        let outcomes = compression_attacks(&store, &out.run_id, &plan).unwrap();
        assert_eq!(outcomes.len(), 7);
        for o in &outcomes {
            for a in &o.accuracy {
                assert!((0.0..=1.0).contains(a), "{} {a}", o.method);
            }
            if o.method != "uniform_scale" {
                assert!((0.0..=1.0 + 1e-12).contains(&o.retained_energy), "{}", o.method);
            }
        }
        // Full rank, keep-all, and unit scale all evaluate the same
        // parameters, so their accuracies agree exactly.
        let full_rank = &outcomes[1];
        let keep_all = &outcomes[3];
        let unit = &outcomes[4];
        assert_eq!(full_rank.accuracy, keep_all.accuracy);
        assert_eq!(keep_all.accuracy, unit.accuracy);

        let csv =
            std::fs::read_to_string(store.analysis_dir(&out.run_id).join("compress.csv"))
                .unwrap();
        assert_eq!(csv.lines().count(), 1 + 7);
        assert!(csv.starts_with("method,parameter,retained_energy,acc_add,acc_mul"));
    }
}
