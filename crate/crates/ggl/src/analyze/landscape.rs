//! Loss-landscape probes over a completed run: how much of each update
//! commutator escapes the low-rank trajectory subspace, where the commutator
//! series first leaves its own noise floor, and how negative the sharpest
//! descent direction of the total-loss Hessian gets.
//!
//! Everything here replays from stored checkpoints; nothing mutates a run.

use crate::analyze::defect::{detect_onset, norm, orthogonal_fraction};
use crate::analyze::probes::{sample_defects, ProbeBuffers};
use crate::analyze::trajectory::ensure_basis;
use crate::data::{full_dataset, gather, split, LabeledBatch, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{Model, ParamVector, Workspace};
use crate::numerics::{extreme_eigenvalue, EigenEstimate, ExtremeMode, SeededRng};
use crate::persist::{load_checkpoint, read_metrics, RowKind, Store};
use std::io::Write;

/// Defects with norm at or below this are treated as numerically degenerate:
/// the replay runs in f64, where accumulated rounding across the four
/// gradient evaluations sits around 1e-15, leaving five orders of headroom.
pub const DEGENERACY_FLOOR: f64 = 1e-10;
/// Rank of the trajectory basis the defect is projected against.
pub const RHO_BASIS_RANK: usize = 10;

/// Examples drawn for the Hessian probe's fixed batch.
pub const DEFAULT_HESSIAN_BATCH: usize = 2048;
/// Iteration cap per power-iteration phase.
pub const DEFAULT_POWER_ITERS: usize = 80;
/// Relative residual target for the eigenvalue estimate.
pub const DEFAULT_POWER_TOL: f64 = 1e-3;
/// Displacement scale for Hessian-vector finite differences.
pub const HVP_EPS_SCALE: f64 = 1e-3;
/// Rolling-median window for onset detection.
pub const ONSET_WINDOW: usize = 20;

#[derive(Debug, Clone, Copy)]
pub struct DefectStat {
    pub norm: f64,
    /// Fraction of the defect orthogonal to the trajectory basis; None when
    /// the norm sits at or below the degeneracy floor.
    pub rho: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RhoPoint {
    pub step: u64,
    pub total: DefectStat,
    pub per_task: Vec<DefectStat>,
}

fn stat(delta: &[f64], basis: &[Vec<f64>]) -> DefectStat {
    let n = norm(delta);
    DefectStat {
        norm: n,
        rho: (n > DEGENERACY_FLOOR).then(|| orthogonal_fraction(delta, basis)),
    }
}

/// Replays the update commutator at every stored checkpoint and projects it
/// against the run's rank-`RHO_BASIS_RANK` trajectory basis. Batches come
/// from the same substream the inline probe uses, so at steps where the run
/// also measured inline, the norms agree bitwise. Writes analysis/rho.csv.
pub fn rho_at_checkpoints(store: &Store, run_id: &str) -> Result<Vec<RhoPoint>> {
    let manifest = store.read_manifest(run_id)?;
    let model = Model::new(manifest.model.clone())?;
    let basis = ensure_basis(store, run_id, RHO_BASIS_RANK)?;
    let specs: Vec<TaskSpec> = manifest.run.tasks.iter().map(|&t| TaskSpec::new(t)).collect();
    let dataset = full_dataset(&specs);
    let holdout = split(&dataset, manifest.run.seed);
    let mut buf = ProbeBuffers::new(&model.layout);

    let mut points = Vec::new();
    for step in store.checkpoint_index(run_id)? {
        let (_, params) =
            load_checkpoint::<f32>(&store.checkpoint_path(run_id, step), &model.layout)?;
        let theta: Vec<f64> = params.values.iter().map(|&x| x as f64).collect();
        let sample = sample_defects(
            &model,
            &dataset,
            &holdout,
            manifest.run.seed,
            manifest.run.batch_size,
            step,
            &theta,
            &mut buf,
        )?;
        points.push(RhoPoint {
            step,
            total: stat(&sample.total, &basis),
            per_task: sample.per_task.iter().map(|d| stat(d, &basis)).collect(),
        });
    }

    let path = store.analysis_dir(run_id).join("rho.csv");
    let mut header = String::from("step,defect_total,rho_total");
    for t in &manifest.run.tasks {
        header.push_str(&format!(",defect_{t},rho_{t}"));
    }
    crate::persist::atomic_write(&path, |w| {
        writeln!(w, "{header}")?;
        for p in &points {
            let mut line = format!("{},{},{}", p.step, p.total.norm, fmt_opt(p.total.rho));
            for s in &p.per_task {
                line.push_str(&format!(",{},{}", s.norm, fmt_opt(s.rho)));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    })?;
    Ok(points)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// One onset measurement: the first step at which a commutator series
/// exceeds `c` times its trailing rolling median.
#[derive(Debug, Clone)]
pub struct OnsetRow {
    /// Task id, or "total" for the joint-loss series.
    pub series: String,
    pub c: f64,
    pub onset_step: Option<u64>,
    /// First eval step at or above the grokking threshold for this task
    /// (None for the total series and for tasks that never grokked).
    pub grok_step: Option<u64>,
}

/// Onset detection over the inline commutator series of a completed run,
/// once per threshold in `cs`. Writes analysis/onsets.csv.
pub fn onsets(store: &Store, run_id: &str, cs: &[f64], window: usize) -> Result<Vec<OnsetRow>> {
    if cs.is_empty() {
        return Err(Error::config("onset detection needs at least one threshold"));
    }
    let manifest = store.read_manifest(run_id)?;
    let tasks = &manifest.run.tasks;
    let rows = read_metrics(&store.metrics_path(run_id), tasks)?;
    let defect_rows: Vec<_> = rows.iter().filter(|r| r.kind == RowKind::Defect).collect();
    if defect_rows.is_empty() {
        return Err(Error::data(format!(
            "run '{run_id}' has no inline commutator rows; train it with the probe enabled"
        )));
    }
    let steps: Vec<u64> = defect_rows.iter().map(|r| r.step).collect();
    let series = |get: &dyn Fn(&crate::persist::MetricsRow) -> Option<f64>| -> Result<Vec<f64>> {
        defect_rows
            .iter()
            .map(|r| get(r).ok_or_else(|| Error::data("commutator row missing a defect value")))
            .collect()
    };

    let mut out = Vec::new();
    for &c in cs {
        if !(c.is_finite() && c > 1.0) {
            return Err(Error::config(format!("onset threshold {c} must exceed 1")));
        }
        let values = series(&|r| r.defect_total)?;
        out.push(OnsetRow {
            series: "total".into(),
            c,
            onset_step: detect_onset(&steps, &values, c, window),
            grok_step: None,
        });
        for (t, &task) in tasks.iter().enumerate() {
            let values = series(&|r| r.defect[t])?;
            out.push(OnsetRow {
                series: task.id().to_string(),
                c,
                onset_step: detect_onset(&steps, &values, c, window),
                grok_step: manifest
                    .grok
                    .iter()
                    .find(|g| g.task == task)
                    .and_then(|g| g.grok_step),
            });
        }
    }

    let path = store.analysis_dir(run_id).join("onsets.csv");
    crate::persist::atomic_write(&path, |w| {
        writeln!(w, "c,window,series,onset_step,grok_step")?;
        for r in &out {
            writeln!(
                w,
                "{},{window},{},{},{}",
                r.c,
                r.series,
                r.onset_step.map(|s| s.to_string()).unwrap_or_default(),
                r.grok_step.map(|s| s.to_string()).unwrap_or_default(),
            )?;
        }
        Ok(())
    })?;
    Ok(out)
}

/// One cross-loss commutator measurement: loss `a` stepped on batch A against
/// loss `b` stepped on batch B, so the record carries both loss ids.
#[derive(Debug, Clone)]
pub struct CrossDefectPoint {
    pub step: u64,
    pub loss_a: TaskKind,
    pub loss_b: TaskKind,
    pub stat: DefectStat,
}

/// Replays the commutator at every checkpoint with a different task loss on
/// each side of the pair. Batches come from the same substream as the
/// same-loss probe, so the only change is which head drives each step.
/// Writes analysis/defect_cross_<a>_<b>.csv.
pub fn cross_task_defects(
    store: &Store,
    run_id: &str,
    loss_a: TaskKind,
    loss_b: TaskKind,
) -> Result<Vec<CrossDefectPoint>> {
    let manifest = store.read_manifest(run_id)?;
    let tasks = &manifest.run.tasks;
    let side = |t: TaskKind| -> Result<usize> {
        tasks
            .iter()
            .position(|&k| k == t)
            .ok_or_else(|| Error::config(format!("run '{run_id}' does not train task '{t}'")))
    };
    let (ta, tb) = (side(loss_a)?, side(loss_b)?);
    if ta == tb {
        return Err(Error::config("cross-task commutator needs two distinct losses"));
    }
    let model = Model::new(manifest.model.clone())?;
    let basis = ensure_basis(store, run_id, RHO_BASIS_RANK)?;
    let specs: Vec<TaskSpec> = tasks.iter().map(|&t| TaskSpec::new(t)).collect();
    let dataset = full_dataset(&specs);
    let holdout = split(&dataset, manifest.run.seed);
    let mut buf = ProbeBuffers::new(&model.layout);

    let mut points = Vec::new();
    for step in store.checkpoint_index(run_id)? {
        let (_, params) =
            load_checkpoint::<f32>(&store.checkpoint_path(run_id, step), &model.layout)?;
        let theta: Vec<f64> = params.values.iter().map(|&x| x as f64).collect();
        let delta = cross_defect_at(
            &model,
            &dataset,
            &holdout,
            manifest.run.seed,
            manifest.run.batch_size,
            step,
            &theta,
            (ta, tb),
            &mut buf,
        )?;
        points.push(CrossDefectPoint { step, loss_a, loss_b, stat: stat(&delta, &basis) });
    }

    let path = store
        .analysis_dir(run_id)
        .join(format!("defect_cross_{loss_a}_{loss_b}.csv"));
    crate::persist::atomic_write(&path, |w| {
        writeln!(w, "step,loss_a,loss_b,defect,rho")?;
        for p in &points {
            writeln!(
                w,
                "{},{},{},{},{}",
                p.step,
                p.loss_a,
                p.loss_b,
                p.stat.norm,
                fmt_opt(p.stat.rho)
            )?;
        }
        Ok(())
    })?;
    Ok(points)
}

#[allow(clippy::too_many_arguments)]
fn cross_defect_at(
    model: &Model,
    dataset: &crate::data::PairDataset,
    holdout: &crate::data::SplitHandle,
    seed: u64,
    batch_size: usize,
    step: u64,
    theta: &[f64],
    sides: (usize, usize),
    buf: &mut ProbeBuffers,
) -> Result<Vec<f64>> {
    use crate::analyze::probes::{Probe, ProbeSide, DEFECT_ETA};
    let k = batch_size.min(holdout.train.len());
    let mut rng = SeededRng::substream(seed, "defect-batches", step);
    let mut pick = || -> Vec<u32> {
        rng.sample_indices(holdout.train.len(), k)
            .into_iter()
            .map(|i| holdout.train[i])
            .collect()
    };
    let ia = pick();
    let ib = pick();
    let batch_a = gather(dataset, &ia);
    let batch_b = gather(dataset, &ib);
    let active_a = [sides.0];
    let active_b = [sides.1];
    let mut probe = Probe {
        a: ProbeSide { model, batch: &batch_a, active: &active_a },
        b: ProbeSide { model, batch: &batch_b, active: &active_b },
        buf,
    };
    crate::analyze::defect::update_commutator(theta, &mut probe, DEFECT_ETA)
}

/// Mean pairwise cosine of one task's gradient across distinct batches.
#[derive(Debug, Clone)]
pub struct TaskCosine {
    pub task: TaskKind,
    pub mean: f64,
    /// Pairs that entered the mean.
    pub pairs: usize,
    /// Pairs dropped because one gradient had zero norm.
    pub skipped: usize,
}

/// Mean cosine between two tasks' gradients on matched batches.
#[derive(Debug, Clone)]
pub struct PairCosine {
    pub task_a: TaskKind,
    pub task_b: TaskKind,
    pub mean: f64,
    pub pairs: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct CosineStats {
    pub same_task: Vec<TaskCosine>,
    pub cross_task: Vec<PairCosine>,
}

/// Batches drawn for one gradient-cosine measurement.
pub const DEFAULT_COSINE_BATCHES: usize = 8;

/// Gradient alignment structure at one parameter point: per-task gradients on
/// `n_batches` fixed batches, compared within a task across batches and
/// across tasks on matched batches. Batches come from substream
/// (seed, "cosine-batches", step).
#[allow(clippy::too_many_arguments)]
pub fn gradient_cosines(
    model: &Model,
    theta: &[f64],
    dataset: &crate::data::PairDataset,
    holdout: &crate::data::SplitHandle,
    seed: u64,
    batch_size: usize,
    n_batches: usize,
    step: u64,
) -> Result<CosineStats> {
    if n_batches < 2 {
        return Err(Error::config("gradient cosines need at least two batches"));
    }
    let n_tasks = model.config.tasks.len();
    let k = batch_size.min(holdout.train.len());
    let mut rng = SeededRng::substream(seed, "cosine-batches", step);
    let batches: Vec<LabeledBatch> = (0..n_batches)
        .map(|_| {
            let idx: Vec<u32> = rng
                .sample_indices(holdout.train.len(), k)
                .into_iter()
                .map(|i| holdout.train[i])
                .collect();
            gather(dataset, &idx)
        })
        .collect();

    let mut params = ParamVector::<f64>::zeros(model.layout.clone());
    params.values.copy_from_slice(theta);
    let mut grad = ParamVector::<f64>::zeros(model.layout.clone());
    let mut ws = Workspace::new();
    let mut grads: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let mut per_batch = Vec::with_capacity(n_batches);
        for batch in &batches {
            model.loss_and_grad(&params, batch, &[t], &mut ws, &mut grad)?;
            per_batch.push(grad.values.clone());
        }
        grads.push(per_batch);
    }

    let cosine = |a: &[f64], b: &[f64]| -> Option<f64> {
        let d = norm(a) * norm(b);
        (d > 0.0).then(|| crate::numerics::dot(a, b) / d)
    };

    let mut same_task = Vec::with_capacity(n_tasks);
    for (t, per_batch) in grads.iter().enumerate() {
        let (mut sum, mut pairs, mut skipped) = (0.0, 0usize, 0usize);
        for i in 0..n_batches {
            for j in i + 1..n_batches {
                match cosine(&per_batch[i], &per_batch[j]) {
                    Some(c) => {
                        sum += c;
                        pairs += 1;
                    }
                    None => skipped += 1,
                }
            }
        }
        same_task.push(TaskCosine {
            task: model.config.tasks[t],
            mean: if pairs > 0 { sum / pairs as f64 } else { f64::NAN },
            pairs,
            skipped,
        });
    }

    let mut cross_task = Vec::new();
    for a in 0..n_tasks {
        for b in a + 1..n_tasks {
            let (mut sum, mut pairs, mut skipped) = (0.0, 0usize, 0usize);
            for i in 0..n_batches {
                match cosine(&grads[a][i], &grads[b][i]) {
                    Some(c) => {
                        sum += c;
                        pairs += 1;
                    }
                    None => skipped += 1,
                }
            }
            cross_task.push(PairCosine {
                task_a: model.config.tasks[a],
                task_b: model.config.tasks[b],
                mean: if pairs > 0 { sum / pairs as f64 } else { f64::NAN },
                pairs,
                skipped,
            });
        }
    }
    Ok(CosineStats { same_task, cross_task })
}

/// Gradient-cosine structure replayed at every stored checkpoint.
/// Writes analysis/cosines.csv.
pub fn cosine_series(
    store: &Store,
    run_id: &str,
    n_batches: usize,
) -> Result<Vec<(u64, CosineStats)>> {
    let manifest = store.read_manifest(run_id)?;
    let model = Model::new(manifest.model.clone())?;
    let specs: Vec<TaskSpec> = manifest.run.tasks.iter().map(|&t| TaskSpec::new(t)).collect();
    let dataset = full_dataset(&specs);
    let holdout = split(&dataset, manifest.run.seed);

    let mut out = Vec::new();
    for step in store.checkpoint_index(run_id)? {
        let (_, params) =
            load_checkpoint::<f32>(&store.checkpoint_path(run_id, step), &model.layout)?;
        let theta: Vec<f64> = params.values.iter().map(|&x| x as f64).collect();
        let stats = gradient_cosines(
            &model,
            &theta,
            &dataset,
            &holdout,
            manifest.run.seed,
            manifest.run.batch_size,
            n_batches,
            step,
        )?;
        out.push((step, stats));
    }

    let path = store.analysis_dir(run_id).join("cosines.csv");
    crate::persist::atomic_write(&path, |w| {
        writeln!(w, "step,kind,task_a,task_b,mean_cos,pairs,skipped")?;
        for (step, stats) in &out {
            for s in &stats.same_task {
                writeln!(w, "{step},same,{},{},{},{},{}", s.task, s.task, s.mean, s.pairs, s.skipped)?;
            }
            for c in &stats.cross_task {
                writeln!(
                    w,
                    "{step},cross,{},{},{},{},{}",
                    c.task_a, c.task_b, c.mean, c.pairs, c.skipped
                )?;
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// Central-difference Hessian-vector product: [grad(theta + eps v) -
/// grad(theta - eps v)] / (2 eps). Exact on quadratics up to rounding.
pub fn central_hvp(
    grad_fn: &mut dyn FnMut(&[f64], &mut [f64]) -> Result<()>,
    theta: &[f64],
    v: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    let p = theta.len();
    if v.len() != p {
        return Err(Error::config("direction length does not match parameter count"));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::config(format!("finite-difference step {eps} must be positive")));
    }
    let mut shifted = vec![0.0; p];
    let mut plus = vec![0.0; p];
    let mut minus = vec![0.0; p];
    for i in 0..p {
        shifted[i] = theta[i] + eps * v[i];
    }
    grad_fn(&shifted, &mut plus)?;
    for i in 0..p {
        shifted[i] = theta[i] - eps * v[i];
    }
    grad_fn(&shifted, &mut minus)?;
    let inv = 1.0 / (2.0 * eps);
    Ok(plus.iter().zip(&minus).map(|(a, b)| (a - b) * inv).collect())
}

/// Displacement used for unit directions at this parameter scale: the
/// per-coordinate perturbation lands near HVP_EPS_SCALE times the
/// root-mean-square coordinate magnitude.
pub fn hvp_epsilon(theta: &[f64]) -> f64 {
    HVP_EPS_SCALE * norm(theta).max(1.0) / (theta.len() as f64).sqrt()
}

/// Total-loss Hessian-vector products on one fixed batch of a model.
pub struct HessianProbe<'a> {
    model: &'a Model,
    batch: LabeledBatch,
    active: Vec<usize>,
    theta: Vec<f64>,
    eps: f64,
    params: ParamVector<f64>,
    grad: ParamVector<f64>,
    ws: Workspace<f64>,
    /// Gradient evaluations consumed so far.
    pub evals: usize,
}

impl<'a> HessianProbe<'a> {
    pub fn new(model: &'a Model, batch: LabeledBatch, theta: Vec<f64>) -> Self {
        let eps = hvp_epsilon(&theta);
        HessianProbe {
            active: (0..model.config.tasks.len()).collect(),
            params: ParamVector::zeros(model.layout.clone()),
            grad: ParamVector::zeros(model.layout.clone()),
            ws: Workspace::new(),
            evals: 0,
            model,
            batch,
            theta,
            eps,
        }
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    fn grad_at(&mut self, theta: &[f64], out: &mut [f64]) -> Result<()> {
        self.params.values.copy_from_slice(theta);
        self.model.loss_and_grad(
            &self.params,
            &self.batch,
            &self.active,
            &mut self.ws,
            &mut self.grad,
        )?;
        out.copy_from_slice(&self.grad.values);
        self.evals += 1;
        Ok(())
    }

    pub fn apply(&mut self, v: &[f64]) -> Result<Vec<f64>> {
        let theta = std::mem::take(&mut self.theta);
        let eps = self.eps;
        let result = central_hvp(&mut |t, out| self.grad_at(t, out), &theta, v, eps);
        self.theta = theta;
        result
    }
}

#[derive(Debug, Clone)]
pub struct HessianPoint {
    pub step: u64,
    /// step / last_step of the run it was probed on.
    pub fraction: f64,
    pub lambda_min: f64,
    pub residual: f64,
    pub applications: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct HessianSettings {
    pub batch_size: usize,
    pub iters: usize,
    pub tol: f64,
}

impl Default for HessianSettings {
    fn default() -> Self {
        HessianSettings {
            batch_size: DEFAULT_HESSIAN_BATCH,
            iters: DEFAULT_POWER_ITERS,
            tol: DEFAULT_POWER_TOL,
        }
    }
}

/// Minimum Hessian eigenvalue of the total loss at the checkpoints nearest
/// the requested training fractions. One fixed batch per run (drawn from
/// substream "hessian-batch") keeps the estimates comparable across steps
/// and across runs that share a seed policy. Writes analysis/hessian.csv.
pub fn min_eigen_curve(
    store: &Store,
    run_id: &str,
    fractions: &[f64],
    settings: HessianSettings,
) -> Result<Vec<HessianPoint>> {
    if fractions.is_empty() {
        return Err(Error::config("eigenvalue curve needs at least one fraction"));
    }
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::config("training fractions must lie in [0, 1]"));
    }
    let manifest = store.read_manifest(run_id)?;
    let model = Model::new(manifest.model.clone())?;
    let ckpts = store.checkpoint_index(run_id)?;
    if ckpts.is_empty() {
        return Err(Error::data(format!("run '{run_id}' has no checkpoints")));
    }
    let last = manifest.last_step.max(1);

    let mut steps: Vec<u64> = fractions
        .iter()
        .map(|f| {
            let target = (f * last as f64).round() as u64;
            *ckpts
                .iter()
                .min_by_key(|&&s| s.abs_diff(target))
                .expect("non-empty checkpoint list")
        })
        .collect();
    steps.sort_unstable();
    steps.dedup();

    let specs: Vec<TaskSpec> = manifest.run.tasks.iter().map(|&t| TaskSpec::new(t)).collect();
    let dataset = full_dataset(&specs);
    let holdout = split(&dataset, manifest.run.seed);
    let k = settings.batch_size.min(holdout.train.len());
    let mut batch_rng = SeededRng::substream(manifest.run.seed, "hessian-batch", 0);
    let indices: Vec<u32> = batch_rng
        .sample_indices(holdout.train.len(), k)
        .into_iter()
        .map(|i| holdout.train[i])
        .collect();

    let mut points = Vec::new();
    for &step in &steps {
        let (_, params) =
            load_checkpoint::<f32>(&store.checkpoint_path(run_id, step), &model.layout)?;
        let theta: Vec<f64> = params.values.iter().map(|&x| x as f64).collect();
        let est = min_eigenvalue(&model, gather(&dataset, &indices), theta, manifest.run.seed, step, &settings)?;
        log::info!(
            "{run_id}: step {step} lambda_min {:.3} (residual {:.2e}, {} applications)",
            est.value,
            est.residual,
            est.applications
        );
        points.push(HessianPoint {
            step,
            fraction: step as f64 / last as f64,
            lambda_min: est.value,
            residual: est.residual,
            applications: est.applications,
            converged: est.converged,
        });
    }

    let path = store.analysis_dir(run_id).join("hessian.csv");
    crate::persist::atomic_write(&path, |w| {
        writeln!(w, "step,fraction,lambda_min,residual,applications,converged")?;
        for p in &points {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                p.step, p.fraction, p.lambda_min, p.residual, p.applications, p.converged
            )?;
        }
        Ok(())
    })?;
    Ok(points)
}

/// Per-loss bottom eigenvalue at one probed step.
#[derive(Debug, Clone)]
pub struct TaskHessianPoint {
    pub step: u64,
    pub fraction: f64,
    pub task: TaskKind,
    pub lambda_min: f64,
    pub residual: f64,
    pub applications: usize,
    pub converged: bool,
}

/// Bottom Hessian eigenvalue of each task's own loss at the checkpoints
/// nearest the requested fractions, on the same fixed batch the total-loss
/// curve uses. Writes analysis/hessian_tasks.csv.
pub fn min_eigen_curve_per_task(
    store: &Store,
    run_id: &str,
    fractions: &[f64],
    settings: HessianSettings,
) -> Result<Vec<TaskHessianPoint>> {
    if fractions.is_empty() {
        return Err(Error::config("eigenvalue curve needs at least one fraction"));
    }
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::config("training fractions must lie in [0, 1]"));
    }
    let manifest = store.read_manifest(run_id)?;
    let model = Model::new(manifest.model.clone())?;
    let ckpts = store.checkpoint_index(run_id)?;
    if ckpts.is_empty() {
        return Err(Error::data(format!("run '{run_id}' has no checkpoints")));
    }
    let last = manifest.last_step.max(1);
    let mut steps: Vec<u64> = fractions
        .iter()
        .map(|f| {
            let target = (f * last as f64).round() as u64;
            *ckpts
                .iter()
                .min_by_key(|&&s| s.abs_diff(target))
                .expect("non-empty checkpoint list")
        })
        .collect();
    steps.sort_unstable();
    steps.dedup();

    let specs: Vec<TaskSpec> = manifest.run.tasks.iter().map(|&t| TaskSpec::new(t)).collect();
    let dataset = full_dataset(&specs);
    let holdout = split(&dataset, manifest.run.seed);
    let k = settings.batch_size.min(holdout.train.len());
    let mut batch_rng = SeededRng::substream(manifest.run.seed, "hessian-batch", 0);
    let indices: Vec<u32> = batch_rng
        .sample_indices(holdout.train.len(), k)
        .into_iter()
        .map(|i| holdout.train[i])
        .collect();

    let mut points = Vec::new();
    for &step in &steps {
        let (_, params) =
            load_checkpoint::<f32>(&store.checkpoint_path(run_id, step), &model.layout)?;
        let theta: Vec<f64> = params.values.iter().map(|&x| x as f64).collect();
        for (t, &task) in manifest.run.tasks.iter().enumerate() {
            let est = min_eigenvalue_for(
                &model,
                gather(&dataset, &indices),
                theta.clone(),
                &[t],
                manifest.run.seed,
                step,
                &settings,
            )?;
            log::info!(
                "{run_id}: step {step} {task} lambda_min {:.3} (residual {:.2e})",
                est.value,
                est.residual
            );
            points.push(TaskHessianPoint {
                step,
                fraction: step as f64 / last as f64,
                task,
                lambda_min: est.value,
                residual: est.residual,
                applications: est.applications,
                converged: est.converged,
            });
        }
    }

    let path = store.analysis_dir(run_id).join("hessian_tasks.csv");
    crate::persist::atomic_write(&path, |w| {
        writeln!(w, "step,fraction,task,lambda_min,residual,applications,converged")?;
        for p in &points {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                p.step, p.fraction, p.task, p.lambda_min, p.residual, p.applications, p.converged
            )?;
        }
        Ok(())
    })?;
    Ok(points)
}

/// Minimum eigenvalue of the total-loss Hessian at one parameter point.
pub fn min_eigenvalue(
    model: &Model,
    batch: LabeledBatch,
    theta: Vec<f64>,
    seed: u64,
    step: u64,
    settings: &HessianSettings,
) -> Result<EigenEstimate> {
    let active: Vec<usize> = (0..model.config.tasks.len()).collect();
    min_eigenvalue_for(model, batch, theta, &active, seed, step, settings)
}

/// Minimum Hessian eigenvalue of the loss restricted to `active` task heads.
/// The power iteration draws its start vector from the same substream
/// regardless of the active set, keeping per-loss estimates comparable.
pub fn min_eigenvalue_for(
    model: &Model,
    batch: LabeledBatch,
    theta: Vec<f64>,
    active: &[usize],
    seed: u64,
    step: u64,
    settings: &HessianSettings,
) -> Result<EigenEstimate> {
    if active.is_empty() || active.iter().any(|&t| t >= model.config.tasks.len()) {
        return Err(Error::config("active task set must be non-empty and in range"));
    }
    let p = theta.len();
    let mut probe = HessianProbe::new(model, batch, theta);
    probe.active = active.to_vec();
    let mut rng = SeededRng::substream(seed, "hessian-power", step);
    let mut probe_err: Option<Error> = None;
    let mut apply = |v: &[f64]| -> Vec<f64> {
        match probe.apply(v) {
            Ok(hv) => hv,
            Err(e) => {
                probe_err = Some(e);
                vec![0.0; p]
            }
        }
    };
    let est = extreme_eigenvalue(
        &mut apply,
        p,
        ExtremeMode::Min,
        settings.iters,
        settings.tol,
        &mut rng,
    );
    if let Some(e) = probe_err {
        return Err(e);
    }
    est
}
