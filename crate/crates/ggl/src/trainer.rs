//! Training loop and optimizer.
//!
//! AdamW with gradient clipping before any moment update and decoupled decay
//! applied only to matrix-shaped segments. Batching, initialization, and the
//! inline probes all draw from labeled substreams of the run seed, so a
//! config fully determines the metrics stream within one build.
//!
//! On the eval cadence the loop scores both splits and appends an `eval`
//! metrics row whose grad_norm column carries the pre-clip norm from the
//! most recent step (empty at step 0 and on the first row after a resume).
//! Checkpoints land every `checkpoint_every` steps including step 0 and the
//! final step; optimizer snapshots land every tenth checkpoint, and a run
//! resumes from the newest step that has both.

use crate::analyze::defect::norm as l2norm;
use crate::analyze::probes::{sample_defects, ProbeBuffers};
use crate::analyze::trajectory::ensure_basis;
use crate::data::{
    batches, full_dataset, gather, split, PairDataset, SplitHandle, TaskKind, TaskSpec,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamVector, Real, Workspace};
use crate::numerics::SeededRng;
use crate::persist::{
    load_checkpoint, load_optimizer_state, save_checkpoint, save_optimizer_state,
    truncate_metrics_after, GrokSummary, MetricsRow, MetricsWriter, RowKind, RunManifest,
    RunStatus, Store,
};
use crate::run::{InterventionKind, RunConfig};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Test accuracy at which a task counts as grokked.
pub const GROK_THRESHOLD: f64 = 0.90;
/// Grokking is confirmed by this many consecutive evals at or above 0.98.
pub const CONFIRM_THRESHOLD: f64 = 0.98;
pub const CONFIRM_WINDOW: usize = 3;
pub use crate::analyze::probes::DEFECT_ETA;
/// Inline probe cadence in steps.
pub const DEFECT_EVERY: u64 = 100;
/// Optimizer snapshots land every RESUME_STRIDE checkpoints.
pub const RESUME_STRIDE: u64 = 10;
/// Intervention bases must satisfy max|B^T B - I| at or below this.
pub const BASIS_ORTHO_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct AdamHp {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl From<&RunConfig> for AdamHp {
    fn from(cfg: &RunConfig) -> Self {
        AdamHp {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
        }
    }
}

pub struct OptimState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Completed steps; drives bias correction.
    pub t: u64,
}

impl<T: Real> OptimState<T> {
    pub fn zeros(p: usize) -> Self {
        OptimState { m: vec![T::zero(); p], v: vec![T::zero(); p], t: 0 }
    }
}

/// One AdamW step, in order: finiteness gate, global-norm clip, moment
/// update with bias correction, decoupled decay of decayable segments.
/// The gradient buffer is clipped in place. Returns the pre-clip norm.
pub fn adamw_step<T: Real>(
    params: &mut ParamVector<T>,
    grad: &mut ParamVector<T>,
    state: &mut OptimState<T>,
    hp: &AdamHp,
) -> Result<f64> {
    let p = params.values.len();
    if grad.values.len() != p || state.m.len() != p || state.v.len() != p {
        return Err(Error::config("optimizer buffers disagree on parameter count"));
    }
    let mut sq = 0.0f64;
    for &g in &grad.values {
        let g = g.into_f64();
        sq += g * g;
    }
    if !sq.is_finite() {
        return Err(Error::numerical(format!(
            "non-finite gradient entering optimizer step {}",
            state.t + 1
        )));
    }
    let pre_norm = sq.sqrt();
    if pre_norm > hp.clip_norm {
        let scale = T::from_f64(hp.clip_norm / pre_norm);
        for g in &mut grad.values {
            *g = *g * scale;
        }
    }

    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t.min(i32::MAX as u64) as i32);

    // theta <- theta - lr * wd * theta on the decay set. The Adam
    // displacement is independent of theta, so ordering against it does not
    // change the result.
    if hp.weight_decay != 0.0 {
        let keep = T::from_f64(1.0 - hp.lr * hp.weight_decay);
        let layout = params.layout().clone();
        for seg in layout.segments.iter().filter(|s| s.decayable) {
            for x in &mut params.values[seg.range()] {
                *x = *x * keep;
            }
        }
    }

    let b1 = T::from_f64(hp.beta1);
    let ob1 = T::from_f64(1.0 - hp.beta1);
    let b2 = T::from_f64(hp.beta2);
    let ob2 = T::from_f64(1.0 - hp.beta2);
    let inv_bc1 = T::from_f64(1.0 / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let lr = T::from_f64(hp.lr);
    let eps = T::from_f64(hp.eps);
    for i in 0..p {
        let g = grad.values[i];
        let m = b1 * state.m[i] + ob1 * g;
        let v = b2 * state.v[i] + ob2 * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let mhat = m * inv_bc1;
        let vhat = v * inv_bc2;
        params.values[i] = params.values[i] - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(pre_norm)
}

/// g <- g - strength * (g - B B^T g): removes `strength` of the gradient
/// component lying in the span of the orthonormal columns `basis`.
/// Coefficients accumulate in f64 regardless of T.
pub fn apply_intervention<T: Real>(grad: &mut [T], basis: &[Vec<T>], strength: f64) {
    if basis.is_empty() || strength == 0.0 {
        return;
    }
    let coeffs: Vec<f64> = basis
        .iter()
        .map(|col| {
            debug_assert_eq!(col.len(), grad.len());
            let mut acc = 0.0f64;
            for (b, g) in col.iter().zip(grad.iter()) {
                acc += b.into_f64() * g.into_f64();
            }
            acc
        })
        .collect();
    let keep = T::from_f64(1.0 - strength);
    for g in grad.iter_mut() {
        *g = *g * keep;
    }
    for (col, &c) in basis.iter().zip(&coeffs) {
        let fc = T::from_f64(strength * c);
        for (g, b) in grad.iter_mut().zip(col) {
            *g = fc.mul_add(*b, *g);
        }
    }
}

/// max |<b_i, b_j> - delta_ij| over all column pairs.
pub fn basis_orthonormality_defect(basis: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..basis.len() {
        for j in i..basis.len() {
            let d = crate::numerics::dot(&basis[i], &basis[j]);
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((d - want).abs());
        }
    }
    worst
}

/// Orthonormal basis of `rank` random directions, deterministic in the seed.
/// Gaussian draws per column, then two rounds of Gram-Schmidt.
pub fn random_orthonormal_basis(p: usize, rank: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if rank == 0 || rank > p {
        return Err(Error::config(format!("basis rank {rank} invalid for dimension {p}")));
    }
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(rank);
    for j in 0..rank {
        let mut rng = SeededRng::substream(seed, "random-basis", j as u64);
        let mut v: Vec<f64> = (0..p).map(|_| rng.standard_normal()).collect();
        for _pass in 0..2 {
            for prev in &cols {
                let c = crate::numerics::dot(prev, &v);
                for (vi, pi) in v.iter_mut().zip(prev) {
                    *vi -= c * pi;
                }
            }
        }
        let n = l2norm(&v);
        if n < 1e-12 {
            return Err(Error::numerical("degenerate random basis draw"));
        }
        for vi in &mut v {
            *vi /= n;
        }
        cols.push(v);
    }
    Ok(cols)
}

/// Per-task grokking summary from an (step, per-task test accuracy) series.
pub fn detect_grok(tasks: &[TaskKind], evals: &[(u64, Vec<f64>)]) -> Vec<GrokSummary> {
    tasks
        .iter()
        .enumerate()
        .map(|(t, &task)| {
            let grok_step = evals
                .iter()
                .find(|(_, acc)| acc[t] >= GROK_THRESHOLD)
                .map(|(s, _)| *s);
            let mut confirm_step = None;
            for w in evals.windows(CONFIRM_WINDOW) {
                if w.iter().all(|(_, acc)| acc[t] >= CONFIRM_THRESHOLD) {
                    confirm_step = Some(w[0].0);
                    break;
                }
            }
            GrokSummary {
                task,
                grok_step,
                confirmed: confirm_step.is_some(),
                confirm_step,
                final_test_accuracy: evals.last().map(|(_, acc)| acc[t]).unwrap_or(0.0),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_id: String,
    pub grok: Vec<GrokSummary>,
    pub last_step: u64,
    pub aborted: Option<String>,
    /// Step this invocation resumed from, if any.
    pub resumed_from: Option<u64>,
    /// True when the run was already complete and nothing executed.
    pub already_complete: bool,
    pub wall_seconds: f64,
}

/// Trains the standard architecture under `cfg`, writing everything into
/// the store. Safe to re-invoke: completed runs return immediately and
/// interrupted ones resume from the newest optimizer snapshot.
pub fn train(store: &Store, cfg: &RunConfig) -> Result<TrainOutcome> {
    train_with_model(store, cfg, ModelConfig::standard(cfg.tasks.clone()))
}

/// `train` with an explicit architecture; small configurations keep tests
/// and demos fast. The model's task list must match the run's.
pub fn train_with_model(
    store: &Store,
    cfg: &RunConfig,
    model_config: ModelConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model_config.tasks != cfg.tasks {
        return Err(Error::config("model task list does not match run config"));
    }
    let started = Instant::now();
    let run_id = cfg.run_id();
    
    std::fs::create_dir_all(store.checkpoints_dir(&run_id))?;
    std::fs::create_dir_all(store.resume_dir(&run_id))?;
    std::fs::create_dir_all(store.analysis_dir(&run_id))?;

    // The stored config is the contract for this directory; a different
    // config with the same id is an error, not an overwrite.
    if store.config_path(&run_id).exists() {
        let existing = store.read_config(&run_id)?;
        if existing != *cfg {
            return Err(Error::config(format!(
                "run '{run_id}' already exists with a different configuration"
            )));
        }
    } else {
        store.write_config(cfg)?;
    }

    let mut prior_wall = 0.0f64;
    if store.manifest_path(&run_id).exists() {
        let manifest = store.read_manifest(&run_id)?;
        if manifest.model != model_config {
            return Err(Error::config(format!(
                "run '{run_id}' was recorded with a different model architecture"
            )));
        }
        prior_wall = manifest.wall_seconds;
        if manifest.status == RunStatus::Complete {
            return Ok(TrainOutcome {
                run_id,
                grok: manifest.grok,
                last_step: manifest.last_step,
                aborted: None,
                resumed_from: None,
                already_complete: true,
                wall_seconds: manifest.wall_seconds,
            });
        }
    }

    let model = Model::new(model_config.clone())?;
    let p = model.layout.total();
    let specs: Vec<TaskSpec> = cfg.tasks.iter().map(|&t| TaskSpec::new(t)).collect();
    let dataset = full_dataset(&specs);
    let holdout = split(&dataset, cfg.seed);
    let n_tasks = cfg.tasks.len();
    let active: Vec<usize> = (0..n_tasks).collect();
    let hp = AdamHp::from(cfg);

    // Frozen intervention basis, fixed before step 0 and applied to every
    // gradient of the run.
    let basis: Option<Vec<Vec<f32>>> = match &cfg.intervention {
        None => None,
        Some(spec) => {
            let columns = match spec.kind {
                InterventionKind::OrthoDelete => {
                    let source = spec.basis_run.as_deref().expect("validated");
                    ensure_basis(store, source, spec.rank)?
                }
                InterventionKind::RandomDelete => {
                    random_orthonormal_basis(p, spec.rank, cfg.seed)?
                }
            };
            if columns.iter().any(|c| c.len() != p) {
                return Err(Error::data(format!(
                    "intervention basis dimension {} does not match parameter count {p}",
                    columns.first().map(|c| c.len()).unwrap_or(0)
                )));
            }
            let defect = basis_orthonormality_defect(&columns);
            if defect > BASIS_ORTHO_TOL {
                return Err(Error::numerical(format!(
                    "intervention basis orthonormality defect {defect:.3e} exceeds {BASIS_ORTHO_TOL:.0e}"
                )));
            }
            Some(
                columns
                    .into_iter()
                    .map(|c| c.into_iter().map(|x| x as f32).collect())
                    .collect(),
            )
        }
    };

    // Resume from the newest step holding both a checkpoint and an
    // optimizer snapshot; otherwise initialize from the seed.
    let ckpt_steps = store.checkpoint_index(&run_id)?;
    let resume_steps = store.resume_index(&run_id)?;
    let resume_at = ckpt_steps
        .iter()
        .rev()
        .find(|s| resume_steps.contains(s))
        .copied();

    let mut params: ParamVector<f32>;
    let mut state: OptimState<f32> = OptimState::zeros(p);
    let start_step: u64;
    match resume_at {
        Some(s) => {
            let (ck_step, loaded) =
                load_checkpoint::<f32>(&store.checkpoint_path(&run_id, s), &model.layout)?;
            let (st_step, t, m, v) =
                load_optimizer_state::<f32>(&store.resume_path(&run_id, s), &model.layout)?;
            if ck_step != s || st_step != s || t != s {
                return Err(Error::format(format!(
                    "resume files at step {s} disagree: checkpoint {ck_step}, state {st_step}, t {t}"
                )));
            }
            params = loaded;
            state = OptimState { m, v, t };
            start_step = s;
            truncate_metrics_after(
                &store.metrics_path(&run_id),
                &cfg.tasks,
                s.saturating_sub(1),
            )?;
            log::info!("{run_id}: resuming from step {s}");
        }
        None => {
            params = ParamVector::init(model.layout.clone(), cfg.seed);
            start_step = 0;
            // A stale metrics file without a matching resume point restarts
            // from scratch.
            if store.metrics_path(&run_id).exists() {
                std::fs::remove_file(store.metrics_path(&run_id))?;
            }
        }
    }

    let mut metrics = MetricsWriter::open(&store.metrics_path(&run_id), &cfg.tasks)?;
    let mut eval_history: Vec<(u64, Vec<f64>)> = Vec::new();
    if start_step > 0 {
        for row in crate::persist::read_metrics(&store.metrics_path(&run_id), &cfg.tasks)? {
            if row.kind == RowKind::Eval {
                let accs: Option<Vec<f64>> = row.test_acc.iter().copied().collect();
                eval_history.push((
                    row.step,
                    accs.ok_or_else(|| Error::data("eval row missing test accuracy"))?,
                ));
            }
        }
    }

    let mut manifest = RunManifest {
        schema: 1,
        run_id: run_id.clone(),
        status: RunStatus::Running,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        layout_hash: format!("{:016x}", model.layout.hash64()),
        param_count: p as u64,
        last_step: start_step,
        wall_seconds: prior_wall,
        abort_reason: None,
        grok: vec![],
        model: model_config,
        run: cfg.clone(),
    };
    store.write_manifest(&manifest)?;

    let mut ws: Workspace<f32> = Workspace::new();
    let mut grad = ParamVector::<f32>::zeros(model.layout.clone());
    let mut probe_buffers = if cfg.defect_inline {
        Some(ProbeBuffers::new(&model.layout))
    } else {
        None
    };

    let batches_per_epoch = (holdout.train.len() + cfg.batch_size - 1) / cfg.batch_size;
    let mut epoch_cache: Option<(u64, Vec<Vec<u32>>)> = None;
    let mut last_grad_norm: Option<f64> = None;
    let resume_every = cfg.checkpoint_every * RESUME_STRIDE;

    let mut abort: Option<String> = None;
    let mut step = start_step;
    while step <= cfg.max_steps {
        let final_step = step == cfg.max_steps;

        if step % cfg.eval_every == 0 || final_step {
            let train_stats = model.evaluate(&params, &dataset, &holdout.train, &mut ws)?;
            let test_stats = model.evaluate(&params, &dataset, &holdout.test, &mut ws)?;
            let mut row = MetricsRow::empty(step, RowKind::Eval, n_tasks);
            row.grad_norm = last_grad_norm;
            row.train_loss = train_stats.mean_loss.iter().map(|&x| Some(x)).collect();
            row.train_acc = train_stats.accuracy.iter().map(|&x| Some(x)).collect();
            row.test_loss = test_stats.mean_loss.iter().map(|&x| Some(x)).collect();
            row.test_acc = test_stats.accuracy.iter().map(|&x| Some(x)).collect();
            metrics.append(&row)?;
            eval_history.push((step, test_stats.accuracy.clone()));
            log::info!(
                "{run_id}: step {step} test acc [{}]",
                test_stats
                    .accuracy
                    .iter()
                    .map(|a| format!("{a:.4}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
        }

        if step % cfg.checkpoint_every == 0 || final_step {
            save_checkpoint(&store.checkpoint_path(&run_id, step), step, &params)?;
        }
        if step % resume_every == 0 || final_step {
            save_optimizer_state(
                &store.resume_path(&run_id, step),
                step,
                state.t,
                &state.m,
                &state.v,
                &model.layout,
            )?;
            manifest.last_step = step;
            manifest.wall_seconds = prior_wall + started.elapsed().as_secs_f64();
            store.write_manifest(&manifest)?;
        }

        if cfg.defect_inline && step % DEFECT_EVERY == 0 {
            let buf = probe_buffers.as_mut().expect("allocated when enabled");
            let row = measure_inline_defect(
                &model, &dataset, &holdout, cfg, step, &params, buf, n_tasks,
            )?;
            metrics.append(&row)?;
        }

        if final_step {
            break;
        }

        let epoch = step / batches_per_epoch as u64;
        if epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            epoch_cache = Some((epoch, batches(&holdout, cfg.batch_size, cfg.seed, epoch)));
        }
        let batch_indices =
            &epoch_cache.as_ref().unwrap().1[(step % batches_per_epoch as u64) as usize];
        let batch = gather(&dataset, batch_indices);

        let losses = model.loss_and_grad(&params, &batch, &active, &mut ws, &mut grad)?;
        if losses.iter().any(|l| !l.is_finite()) {
            abort = Some(format!("non-finite loss at step {step}: {losses:?}"));
            break;
        }
        if let (Some(b), Some(spec)) = (&basis, &cfg.intervention) {
            apply_intervention(&mut grad.values, b, spec.strength);
        }
        match adamw_step(&mut params, &mut grad, &mut state, &hp) {
            Ok(norm) => last_grad_norm = Some(norm),
            Err(e) => {
                abort = Some(format!("step {step}: {e}"));
                break;
            }
        }
        step += 1;
    }

    let wall_seconds = prior_wall + started.elapsed().as_secs_f64();
    manifest.wall_seconds = wall_seconds;
    manifest.last_step = step;
    match &abort {
        Some(reason) => {
            // Dump the pre-step parameters next to the regular checkpoints
            // so the failure can be inspected.
            save_checkpoint(&store.checkpoint_path(&run_id, step), step, &params)?;
            manifest.status = RunStatus::Aborted;
            manifest.abort_reason = Some(reason.clone());
        }
        None => {
            manifest.status = RunStatus::Complete;
            manifest.grok = detect_grok(&cfg.tasks, &eval_history);
        }
    }
    store.write_manifest(&manifest)?;

    Ok(TrainOutcome {
        run_id,
        grok: manifest.grok,
        last_step: step,
        aborted: abort,
        resumed_from: if start_step > 0 { Some(start_step) } else { None },
        already_complete: false,
        wall_seconds,
    })
}

/// Inline commutator probe at one step: same-loss/two-batch defects per
/// task plus the joint-loss defect, all in f64 from the widened parameters.
#[allow(clippy::too_many_arguments)]
fn measure_inline_defect(
    model: &Model,
    dataset: &PairDataset,
    holdout: &SplitHandle,
    cfg: &RunConfig,
    step: u64,
    params: &ParamVector<f32>,
    buf: &mut ProbeBuffers,
    n_tasks: usize,
) -> Result<MetricsRow> {
    let theta: Vec<f64> = params.values.iter().map(|&x| x as f64).collect();
    let sample =
        sample_defects(model, dataset, holdout, cfg.seed, cfg.batch_size, step, &theta, buf)?;
    let mut row = MetricsRow::empty(step, RowKind::Defect, n_tasks);
    for (t, delta) in sample.per_task.iter().enumerate() {
        row.defect[t] = Some(l2norm(delta));
    }
    row.defect_total = Some(l2norm(&sample.total));
    Ok(row)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub run_id: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grok_steps: Vec<Option<u64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub name: String,
    pub entries: Vec<SweepEntry>,
}

/// Runs every config in the grid sequentially, isolating failures: one bad
/// run is recorded and the sweep moves on. Re-invoking skips completed runs.
pub fn run_sweep(store: &Store, name: &str, grid: &[RunConfig]) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::config("sweep grid is empty"));
    }
    let mut seen = std::collections::HashSet::new();
    for cfg in grid {
        if !seen.insert(cfg.run_id()) {
            return Err(Error::config(format!(
                "sweep grid repeats run id '{}'",
                cfg.run_id()
            )));
        }
    }
    let sweep_dir = store.root().join("sweeps");
    std::fs::create_dir_all(&sweep_dir)?;
    let path = sweep_dir.join(format!("{name}.toml"));

    let mut report = SweepReport { name: name.to_string(), entries: Vec::new() };
    for cfg in grid {
        let run_id = cfg.run_id();
        log::info!("sweep {name}: starting {run_id}");
        let entry = match train(store, cfg) {
            Ok(outcome) => SweepEntry {
                run_id,
                status: match &outcome.aborted {
                    Some(_) => "aborted".into(),
                    None => "complete".into(),
                },
                error: outcome.aborted.clone(),
                grok_steps: outcome.grok.iter().map(|g| g.grok_step).collect(),
            },
            Err(e) => SweepEntry {
                run_id,
                status: "failed".into(),
                error: Some(e.to_string()),
                grok_steps: vec![],
            },
        };
        report.entries.push(entry);
        let text = toml::to_string_pretty(&report)
            .map_err(|e| Error::format(format!("sweep report: {e}")))?;
        crate::persist::atomic_write(&path, |w| {
            use std::io::Write;
            w.write_all(text.as_bytes())?;
            Ok(())
        })?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InitKind, ParamLayout, SegmentInfo};
    use std::sync::Arc;

    fn raw_layout(segs: &[(&str, usize, bool)]) -> Arc<ParamLayout> {
        let mut offset = 0;
        let segments = segs
            .iter()
            .map(|&(name, len, decayable)| {
                let s = SegmentInfo {
                    name: name.to_string(),
                    offset,
                    shape: if decayable { vec![len, 1] } else { vec![len] },
                    decayable,
                    init: InitKind::Zero,
                };
                offset += len;
                s
            })
            .collect();
        ParamLayout::raw(segments).unwrap()
    }

    fn hp(lr: f64, wd: f64) -> AdamHp {
        AdamHp { lr, beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: wd, clip_norm: 1.0 }
    }

    #[test]
    fn matches_a_scalar_reference_for_200_steps() {
        // Single decayable parameter on the quadratic 0.5 c theta^2.
        let layout = raw_layout(&[("w", 1, true)]);
        let c = 0.31;
        let mut params = ParamVector::<f64>::from_values(layout.clone(), vec![0.8]);
        let mut grad = ParamVector::<f64>::zeros(layout.clone());
        let mut state = OptimState::<f64>::zeros(1);
        let h = hp(1e-2, 0.7);

        // Plainly written reference update.
        let (mut theta, mut m, mut v) = (0.8f64, 0.0f64, 0.0f64);
        for t in 1..=200u64 {
            let g = c * theta;
            grad.values[0] = g;
            adamw_step(&mut params, &mut grad, &mut state, &h).unwrap();

            // g never exceeds clip_norm 1.0 here, so no clipping.
            assert!(g.abs() <= 1.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.98 * v + 0.02 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t as i32));
            let vhat = v / (1.0 - 0.98f64.powi(t as i32));
            theta = theta - h.lr * h.weight_decay * theta - h.lr * mhat / (vhat.sqrt() + h.eps);

            assert!(
                (params.values[0] - theta).abs() <= 1e-12 * theta.abs().max(1.0),
                "step {t}: {} vs {theta}",
                params.values[0]
            );
        }
        assert_eq!(state.t, 200);
    }

    #[test]
    fn clips_by_global_norm_before_moments() {
        let layout = raw_layout(&[("w", 4, true)]);
        let mut params = ParamVector::<f64>::zeros(layout.clone());
        let mut grad = ParamVector::<f64>::from_values(layout.clone(), vec![3.0, 0.0, 4.0, 0.0]);
        let mut state = OptimState::<f64>::zeros(4);
        let pre = adamw_step(&mut params, &mut grad, &mut state, &hp(1e-3, 0.0)).unwrap();
        assert!((pre - 5.0).abs() < 1e-15);
        // Clipped gradient is g * (1/5); first moment is 0.1 of that.
        assert!((state.m[0] - 0.1 * 0.6).abs() < 1e-15);
        assert!((state.m[2] - 0.1 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_without_decay_is_bitwise_identity() {
        let layout = raw_layout(&[("w", 3, true), ("b", 2, false)]);
        let before = vec![0.25f32, -1.5, 3.75, 0.5, -0.125];
        let mut params = ParamVector::<f32>::from_values(layout.clone(), before.clone());
        let mut grad = ParamVector::<f32>::zeros(layout.clone());
        let mut state = OptimState::<f32>::zeros(5);
        for _ in 0..3 {
            adamw_step(&mut params, &mut grad, &mut state, &hp(1e-3, 0.0)).unwrap();
            grad.fill(0.0);
        }
        assert!(params
            .values
            .iter()
            .zip(&before)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn decay_touches_exactly_the_decay_set() {
        let layout = raw_layout(&[("w", 3, true), ("b", 2, false), ("u", 1, true)]);
        let before = vec![1.0f32, -2.0, 4.0, 0.5, -0.25, 8.0];
        let mut params = ParamVector::<f32>::from_values(layout.clone(), before.clone());
        let mut grad = ParamVector::<f32>::zeros(layout.clone());
        let mut state = OptimState::<f32>::zeros(6);
        let h = hp(1e-3, 1.0);
        let steps = 4;
        for _ in 0..steps {
            adamw_step(&mut params, &mut grad, &mut state, &h).unwrap();
            grad.fill(0.0);
        }
        let keep = 1.0f32 - 1e-3;
        for (i, (&after, &orig)) in params.values.iter().zip(&before).enumerate() {
            if i == 3 || i == 4 {
                assert_eq!(after.to_bits(), orig.to_bits(), "non-decayable moved at {i}");
            } else {
                let mut want = orig;
                for _ in 0..steps {
                    want *= keep;
                }
                assert_eq!(after.to_bits(), want.to_bits(), "decay mismatch at {i}");
            }
        }
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let layout = raw_layout(&[("w", 2, true)]);
        let mut params = ParamVector::<f32>::zeros(layout.clone());
        let mut grad = ParamVector::<f32>::from_values(layout.clone(), vec![f32::NAN, 0.0]);
        let mut state = OptimState::<f32>::zeros(2);
        let err = adamw_step(&mut params, &mut grad, &mut state, &hp(1e-3, 0.0)).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert_eq!(state.t, 0, "failed step must not advance the counter");
    }

    #[test]
    fn projection_matches_a_dense_oracle_in_ten_dims() {
        // Two orthonormal directions built from a rotation, plus a
        // hand-evaluated result for strength 0.37.
        let p = 10;
        let alpha = 0.6f64;
        let mut b0 = vec![0.0; p];
        let mut b1 = vec![0.0; p];
        b0[0] = alpha.cos();
        b0[1] = alpha.sin();
        b1[0] = -alpha.sin();
        b1[1] = alpha.cos();
        let basis = vec![b0.clone(), b1.clone()];
        let g: Vec<f64> = (0..p).map(|i| (i as f64 * 0.77).sin() + 0.2).collect();
        let f = 0.37;

        let mut got = g.clone();
        apply_intervention(&mut got, &basis, f);

        let c0: f64 = b0.iter().zip(&g).map(|(a, b)| a * b).sum();
        let c1: f64 = b1.iter().zip(&g).map(|(a, b)| a * b).sum();
        for i in 0..p {
            let proj = c0 * b0[i] + c1 * b1[i];
            let want = (1.0 - f) * g[i] + f * proj;
            assert!((got[i] - want).abs() < 1e-14, "{i}: {} vs {want}", got[i]);
        }
    }

    #[test]
    fn strength_zero_and_one_are_the_identity_and_full_projection() {
        let e0 = vec![1.0f64, 0.0, 0.0];
        let basis = vec![e0];
        let g = vec![0.3f64, -0.7, 0.4];
        let mut same = g.clone();
        apply_intervention(&mut same, &basis, 0.0);
        assert_eq!(same, g);

        // Full strength keeps the in-span part and removes the rest.
        let mut killed = g.clone();
        apply_intervention(&mut killed, &basis, 1.0);
        assert!((killed[0] - 0.3).abs() < 1e-15);
        assert_eq!(killed[1], 0.0);
        assert_eq!(killed[2], 0.0);

        // A vector already in the span is preserved at full strength.
        let mut in_span = vec![0.9f64, 0.0, 0.0];
        apply_intervention(&mut in_span, &basis, 1.0);
        assert!((in_span[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn random_bases_are_orthonormal_and_seed_deterministic() {
        let a = random_orthonormal_basis(64, 10, 7).unwrap();
        let b = random_orthonormal_basis(64, 10, 7).unwrap();
        let c = random_orthonormal_basis(64, 10, 8).unwrap();
        assert!(basis_orthonormality_defect(&a) < 1e-12);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(random_orthonormal_basis(4, 0, 1).is_err());
        assert!(random_orthonormal_basis(4, 5, 1).is_err());
    }

    fn tiny_model(tasks: Vec<TaskKind>) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            heads: 2,
            d_ff: 16,
            layers: 1,
            vocab: 97,
            positions: 2,
            tasks,
        }
    }

    fn tiny_run() -> RunConfig {
        let mut cfg = RunConfig::new(vec![TaskKind::Add, TaskKind::Mul], 1.0, 42, 20);
        cfg.batch_size = 128;
        cfg.eval_every = 5;
        cfg.checkpoint_every = 10;
        cfg
    }

    #[test]
    fn training_lays_down_the_full_run_directory() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let cfg = tiny_run();
        let out = train_with_model(&store, &cfg, tiny_model(cfg.tasks.clone())).unwrap();
        assert_eq!(out.last_step, 20);
        assert!(out.aborted.is_none());
        assert!(!out.already_complete);
        assert_eq!(out.grok.len(), 2);

        let id = &out.run_id;
        assert!(store.config_path(id).exists());
        let manifest = store.read_manifest(id).unwrap();
        assert_eq!(manifest.status, RunStatus::Complete);
        assert_eq!(manifest.last_step, 20);
        assert_eq!(manifest.grok.len(), 2);
        assert_eq!(store.checkpoint_index(id).unwrap(), vec![0, 10, 20]);
        assert_eq!(store.resume_index(id).unwrap(), vec![0, 20]);

        let rows = crate::persist::read_metrics(&store.metrics_path(id), &cfg.tasks).unwrap();
        let steps: Vec<u64> = rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 5, 10, 15, 20]);
        assert!(rows[0].grad_norm.is_none(), "no step has run before step 0");
        assert!(rows[1..].iter().all(|r| r.grad_norm.is_some()));
        assert!(rows
            .iter()
            .all(|r| r.kind == RowKind::Eval && r.test_acc.iter().all(|a| a.is_some())));

        // Re-invoking is a no-op on a complete run.
        let again = train_with_model(&store, &cfg, tiny_model(cfg.tasks.clone())).unwrap();
        assert!(again.already_complete);
        assert_eq!(again.last_step, 20);

        // Same id with different settings is rejected.
        let mut other = cfg.clone();
        other.lr = 2e-3;
        let err = train_with_model(&store, &other, tiny_model(other.tasks.clone())).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn identical_configs_produce_identical_artifacts() {
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (sa, sb) = (Store::open(da.path()).unwrap(), Store::open(db.path()).unwrap());
        let mut cfg = tiny_run();
        cfg.defect_inline = true;
        let a = train_with_model(&sa, &cfg, tiny_model(cfg.tasks.clone())).unwrap();
        let b = train_with_model(&sb, &cfg, tiny_model(cfg.tasks.clone())).unwrap();

        let ma = std::fs::read(sa.metrics_path(&a.run_id)).unwrap();
        let mb = std::fs::read(sb.metrics_path(&b.run_id)).unwrap();
        assert_eq!(ma, mb, "metrics streams diverged");

        let ca = std::fs::read(sa.checkpoint_path(&a.run_id, 20)).unwrap();
        let cb = std::fs::read(sb.checkpoint_path(&b.run_id, 20)).unwrap();
        assert_eq!(ca, cb, "final checkpoints diverged");
    }

    #[test]
    fn resuming_reaches_the_same_parameters() {
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (sa, sb) = (Store::open(da.path()).unwrap(), Store::open(db.path()).unwrap());
        let mut cfg = tiny_run();
        cfg.checkpoint_every = 1;

        let a = train_with_model(&sa, &cfg, tiny_model(cfg.tasks.clone())).unwrap();
        let b = train_with_model(&sb, &cfg, tiny_model(cfg.tasks.clone())).unwrap();
        let id = b.run_id.clone();

        // Strip everything after step 10 and mark the run interrupted.
        let mut manifest = sb.read_manifest(&id).unwrap();
        manifest.status = RunStatus::Running;
        sb.write_manifest(&manifest).unwrap();
        for s in 11..=20u64 {
            std::fs::remove_file(sb.checkpoint_path(&id, s)).unwrap();
        }
        std::fs::remove_file(sb.resume_path(&id, 20)).unwrap();

        let resumed = train_with_model(&sb, &cfg, tiny_model(cfg.tasks.clone())).unwrap();
        assert_eq!(resumed.resumed_from, Some(10));
        assert_eq!(resumed.last_step, 20);
        assert_eq!(sb.read_manifest(&id).unwrap().status, RunStatus::Complete);

        let ca = std::fs::read(sa.checkpoint_path(&a.run_id, 20)).unwrap();
        let cb = std::fs::read(sb.checkpoint_path(&id, 20)).unwrap();
        assert_eq!(ca, cb, "resumed run ended on different parameters");

        // Accuracy history matches the uninterrupted run row for row.
        let ra = crate::persist::read_metrics(&sa.metrics_path(&a.run_id), &cfg.tasks).unwrap();
        let rb = crate::persist::read_metrics(&sb.metrics_path(&id), &cfg.tasks).unwrap();
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(&rb) {
            assert_eq!(x.step, y.step);
            assert_eq!(x.test_acc, y.test_acc);
            assert_eq!(x.train_loss, y.train_loss);
        }
    }

    #[test]
    fn sweeps_isolate_failures_and_reject_bad_grids() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(run_sweep(&store, "empty", &[]).is_err());

        let cfg = tiny_run();
        let dup = vec![cfg.clone(), cfg.clone()];
        assert!(run_sweep(&store, "dup", &dup).is_err());
    }

    #[test]
    fn grok_detection_requires_consecutive_confirmation() {
        let tasks = [TaskKind::Add];
        // 0.97, 0.985, 0.99, 0.97, 0.981, 0.983, 0.992: the first window at
        // or above 0.98 that survives three evals starts at index 4.
        let accs = [0.97, 0.985, 0.99, 0.97, 0.981, 0.983, 0.992];
        let evals: Vec<(u64, Vec<f64>)> = accs
            .iter()
            .enumerate()
            .map(|(i, &a)| (i as u64 * 100, vec![a]))
            .collect();
        let report = detect_grok(&tasks, &evals);
        assert_eq!(report[0].grok_step, Some(0), "0.97 already clears 0.90");
        assert!(report[0].confirmed);
        assert_eq!(report[0].confirm_step, Some(400));
        assert_eq!(report[0].final_test_accuracy, 0.992);

        // High once but never three in a row: unconfirmed.
        let bumpy: Vec<(u64, Vec<f64>)> = [0.1, 0.99, 0.97, 0.99, 0.5]
            .iter()
            .enumerate()
            .map(|(i, &a)| (i as u64, vec![a]))
            .collect();
        let report = detect_grok(&tasks, &bumpy);
        assert_eq!(report[0].grok_step, Some(1));
        assert!(!report[0].confirmed);

        // Never grokked at all.
        let flat: Vec<(u64, Vec<f64>)> =
            (0..5).map(|i| (i as u64, vec![0.02])).collect();
        let report = detect_grok(&tasks, &flat);
        assert_eq!(report[0].grok_step, None);
        assert!(!report[0].confirmed);
    }
}
