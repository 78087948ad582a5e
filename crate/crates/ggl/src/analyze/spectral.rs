//! Attention-operator geometry over a stored run: per-layer singular spectra
//! and commutator norms of the combined query/key matrices, the phase
//! portrait joining those to test accuracy, and rolling Gram statistics of
//! consecutive attention-parameter updates.
//!
//! The spectral objects are the combined all-heads matrices; per-head slices
//! never appear here. Gram windows slide over deltas between consecutive
//! stored checkpoints, so their time resolution is the checkpoint cadence.

use crate::error::{Error, Result};
use crate::model::{Model, ParamVector};
use crate::numerics::{commutator_norm, thin_svd, DenseMatrix};
use crate::persist::{load_checkpoint, read_metrics, RowKind, Store};
use std::io::Write;

/// Number of consecutive checkpoint deltas per Gram window.
pub const GRAM_WINDOW: usize = 10;
/// Relative floor under which trailing singular values stop producing
/// rank candidates: ratios against values this far below sigma_1 say
/// nothing about signal structure.
pub const SPURIOUS_TAIL_FLOOR: f64 = 1e-12;
/// Singular values per matrix written to the spectral CSV.
const CSV_SPECTRUM_COLS: usize = 8;

/// Spectra of one layer's combined query/key matrices at one checkpoint.
#[derive(Debug, Clone)]
pub struct AttentionSpectrum {
    pub step: u64,
    pub layer: usize,
    /// Descending singular values of the combined query matrix.
    pub sigma_q: Vec<f64>,
    /// Descending singular values of the combined key matrix.
    pub sigma_k: Vec<f64>,
    /// Frobenius norm of W_Q W_K - W_K W_Q.
    pub comm: f64,
    /// Mean test accuracy across tasks at this step, when the run's metrics
    /// carry an evaluation at or before it.
    pub mean_test_acc: Option<f64>,
}

impl AttentionSpectrum {
    pub fn gap_q(&self) -> f64 {
        self.sigma_q[0] - self.sigma_q[1]
    }

    pub fn gap_k(&self) -> f64 {
        self.sigma_k[0] - self.sigma_k[1]
    }
}

/// Spectrum record from explicit query/key matrices.
pub fn spectrum_of(
    wq: &DenseMatrix,
    wk: &DenseMatrix,
    step: u64,
    layer: usize,
) -> Result<AttentionSpectrum> {
    if wq.rows() != wq.cols() || wq.rows() != wk.rows() || wk.rows() != wk.cols() {
        return Err(Error::data(format!(
            "query/key matrices must be square and matched, got {}x{} and {}x{}",
            wq.rows(),
            wq.cols(),
            wk.rows(),
            wk.cols()
        )));
    }
    if wq.rows() < 2 {
        return Err(Error::data("spectral gap needs at least a 2x2 matrix"));
    }
    Ok(AttentionSpectrum {
        step,
        layer,
        sigma_q: thin_svd(wq)?.singular_values,
        sigma_k: thin_svd(wk)?.singular_values,
        comm: commutator_norm(wq, wk),
        mean_test_acc: None,
    })
}

fn segment_matrix(params: &ParamVector<f32>, name: &str) -> Result<DenseMatrix> {
    let seg = params
        .layout()
        .find(name)
        .ok_or_else(|| Error::data(format!("no segment named '{name}'")))?;
    let data: Vec<f64> = params.values[seg.range()].iter().map(|&x| x as f64).collect();
    Ok(DenseMatrix::from_vec(seg.shape[0], seg.shape[1], data))
}

/// Spectrum of one layer of a checkpointed parameter vector.
pub fn attention_spectrum(
    params: &ParamVector<f32>,
    layer: usize,
    step: u64,
) -> Result<AttentionSpectrum> {
    let wq = segment_matrix(params, &format!("layer{layer}.attn.wq"))?;
    let wk = segment_matrix(params, &format!("layer{layer}.attn.wk"))?;
    spectrum_of(&wq, &wk, step, layer)
}

/// Mean test accuracy per evaluation step, ascending.
fn accuracy_series(store: &Store, run_id: &str) -> Result<Vec<(u64, f64)>> {
    let manifest = store.read_manifest(run_id)?;
    let rows = read_metrics(&store.metrics_path(run_id), &manifest.run.tasks)?;
    Ok(rows
        .iter()
        .filter(|r| r.kind == RowKind::Eval)
        .filter_map(|r| {
            let accs: Option<Vec<f64>> = r.test_acc.iter().copied().collect();
            accs.map(|a| (r.step, a.iter().sum::<f64>() / a.len() as f64))
        })
        .collect())
}

fn acc_at(series: &[(u64, f64)], step: u64) -> Option<f64> {
    let idx = series.partition_point(|&(s, _)| s <= step);
    idx.checked_sub(1).map(|i| series[i].1)
}

/// Per-checkpoint per-layer spectra for a whole run, joined with the mean
/// test accuracy of the latest evaluation at or before each checkpoint.
/// Writes analysis/spectral.csv; rows ordered by step, then layer.
pub fn spectral_series(store: &Store, run_id: &str) -> Result<Vec<AttentionSpectrum>> {
    let manifest = store.read_manifest(run_id)?;
    let model = Model::new(manifest.model.clone())?;
    let layers = model.config.layers;
    let acc = accuracy_series(store, run_id)?;

    let mut records = Vec::new();
    for step in store.checkpoint_index(run_id)? {
        let (_, params) =
            load_checkpoint::<f32>(&store.checkpoint_path(run_id, step), &model.layout)?;
        for layer in 0..layers {
            let mut rec = attention_spectrum(&params, layer, step)?;
            rec.mean_test_acc = acc_at(&acc, step);
            records.push(rec);
        }
    }

    let cols = CSV_SPECTRUM_COLS.min(model.config.d_model);
    let mut header = String::from("step,layer,g12_q,g12_k,comm,mean_test_acc");
    for i in 1..=cols {
        header.push_str(&format!(",q{i}"));
    }
    for i in 1..=cols {
        header.push_str(&format!(",k{i}"));
    }
    let path = store.analysis_dir(run_id).join("spectral.csv");
    crate::persist::atomic_write(&path, |w| {
        writeln!(w, "{header}")?;
        for r in &records {
            let acc = r.mean_test_acc.map(|a| a.to_string()).unwrap_or_default();
            let mut line =
                format!("{},{},{},{},{},{acc}", r.step, r.layer, r.gap_q(), r.gap_k(), r.comm);
            for s in &r.sigma_q[..cols] {
                line.push_str(&format!(",{s}"));
            }
            for s in &r.sigma_k[..cols] {
                line.push_str(&format!(",{s}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    })?;
    Ok(records)
}

/// Step and value of the largest commutator norm in one layer's series.
/// Ties keep the earliest step.
pub fn peak_comm(series: &[AttentionSpectrum], layer: usize) -> Option<(u64, f64)> {
    series
        .iter()
        .filter(|r| r.layer == layer)
        .fold(None, |best: Option<(u64, f64)>, r| match best {
            Some((_, c)) if c >= r.comm => best,
            _ => Some((r.step, r.comm)),
        })
}

/// Ratio of the two layers' peak commutator norms, bottom over top.
/// None when either layer is absent or the top layer's peak is zero.
pub fn layer_peak_ratio(series: &[AttentionSpectrum]) -> Option<f64> {
    let (_, p0) = peak_comm(series, 0)?;
    let (_, p1) = peak_comm(series, 1)?;
    (p1 != 0.0).then(|| p0 / p1)
}

/// Final commutator norm over peak commutator norm for one layer: values
/// well below 1 mean the non-commutativity burst collapsed after its peak.
pub fn final_over_peak(series: &[AttentionSpectrum], layer: usize) -> Option<f64> {
    let (_, peak) = peak_comm(series, layer)?;
    let last = series.iter().filter(|r| r.layer == layer).next_back()?;
    (peak != 0.0).then(|| last.comm / peak)
}

/// Statistics of one rolling window of parameter updates.
#[derive(Debug, Clone)]
pub struct GramRecord {
    /// Step of the newest checkpoint entering the window.
    pub end_step: u64,
    /// Number of update vectors in the window.
    pub window: usize,
    /// Flattened attention-parameter dimension.
    pub dim: usize,
    /// Descending singular values of the window x dim update matrix.
    pub sigma: Vec<f64>,
    /// Signal rank: weighted-gap argmax over adjacent singular-value ratios.
    pub kstar: usize,
    /// Gap ratio sigma_kstar / sigma_{kstar+1}; infinite when everything
    /// past the signal sits at the degeneracy floor.
    pub r: f64,
    /// sigma_2^2 - sigma_3^2.
    pub g23: f64,
    /// Whether some update vector in the window was exactly zero.
    pub degenerate: bool,
}

/// Signal rank and gap ratio of a descending spectrum: k* maximizes
/// omega_j * (sigma_j / sigma_{j+1}) with omega_j = sigma_j / sum(sigma),
/// the weight suppressing spurious ratios deep in the tail. Candidates whose
/// denominator sits at or below SPURIOUS_TAIL_FLOOR * sigma_1 are skipped;
/// when none qualify the spectrum is rank one and the ratio is infinite.
pub fn signal_rank(sigma: &[f64]) -> (usize, f64) {
    assert!(sigma.len() >= 2, "signal rank needs at least two singular values");
    let floor = sigma[0] * SPURIOUS_TAIL_FLOOR;
    let total: f64 = sigma.iter().sum();
    let mut best: Option<(usize, f64)> = None;
    for j in 1..sigma.len() {
        if sigma[j] <= floor {
            break;
        }
        let score = (sigma[j - 1] / total) * (sigma[j - 1] / sigma[j]);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((j, score));
        }
    }
    match best {
        Some((k, _)) => (k, sigma[k - 1] / sigma[k]),
        None => (1, f64::INFINITY),
    }
}

/// Gram statistics of one window of update vectors (rows of equal length).
pub fn gram_window_stats(updates: &[Vec<f64>], end_step: u64) -> Result<GramRecord> {
    if updates.len() < 3 {
        return Err(Error::data(format!(
            "gram window needs at least 3 update vectors, got {}",
            updates.len()
        )));
    }
    let dim = updates[0].len();
    if updates.iter().any(|u| u.len() != dim) {
        return Err(Error::data("gram window update vectors differ in length"));
    }
    if dim < updates.len() {
        return Err(Error::data(format!(
            "gram window dimension {dim} below window size {}",
            updates.len()
        )));
    }
    let degenerate = updates.iter().any(|u| u.iter().all(|&x| x == 0.0));

    let mut m = DenseMatrix::zeros(updates.len(), dim);
    for (i, u) in updates.iter().enumerate() {
        m.row_mut(i).copy_from_slice(u);
    }
    let sigma = thin_svd(&m)?.singular_values;
    let (kstar, r) = signal_rank(&sigma);
    let g23 = sigma[1] * sigma[1] - sigma[2] * sigma[2];
    Ok(GramRecord {
        end_step,
        window: updates.len(),
        dim,
        sigma,
        kstar,
        r,
        g23,
        degenerate,
    })
}

/// Rolling GRAM_WINDOW statistics over the deltas between consecutive stored
/// checkpoints, restricted to all attention weight segments of every layer.
/// Writes analysis/gram.csv; one record per window, ascending end step.
pub fn gram_series(store: &Store, run_id: &str) -> Result<Vec<GramRecord>> {
    let manifest = store.read_manifest(run_id)?;
    let model = Model::new(manifest.model.clone())?;
    let attn: Vec<std::ops::Range<usize>> = model
        .layout
        .segments
        .iter()
        .filter(|s| s.name.contains(".attn."))
        .map(|s| s.range())
        .collect();
    let steps = store.checkpoint_index(run_id)?;
    if steps.len() < GRAM_WINDOW + 1 {
        return Err(Error::data(format!(
            "run '{run_id}' has {} checkpoints; {} gram windows of {} deltas need at least {}",
            steps.len(),
            1,
            GRAM_WINDOW,
            GRAM_WINDOW + 1
        )));
    }

    let slice_of = |step: u64| -> Result<Vec<f64>> {
        let (_, params) =
            load_checkpoint::<f32>(&store.checkpoint_path(run_id, step), &model.layout)?;
        let mut out = Vec::new();
        for r in &attn {
            out.extend(params.values[r.clone()].iter().map(|&x| x as f64));
        }
        Ok(out)
    };

    let mut prev = slice_of(steps[0])?;
    let mut deltas: Vec<Vec<f64>> = Vec::with_capacity(steps.len() - 1);
    for &step in &steps[1..] {
        let cur = slice_of(step)?;
        deltas.push(cur.iter().zip(&prev).map(|(a, b)| a - b).collect());
        prev = cur;
    }

    let mut records = Vec::new();
    for end in GRAM_WINDOW..=deltas.len() {
        let window = &deltas[end - GRAM_WINDOW..end];
        records.push(gram_window_stats(window, steps[end])?);
    }

    let mut header = String::from("end_step,window,dim,degenerate,kstar,r,g23");
    for i in 1..=GRAM_WINDOW {
        header.push_str(&format!(",sigma_{i}"));
    }
    let path = store.analysis_dir(run_id).join("gram.csv");
    crate::persist::atomic_write(&path, |w| {
        writeln!(w, "{header}")?;
        for rec in &records {
            let mut line = format!(
                "{},{},{},{},{},{},{}",
                rec.end_step,
                rec.window,
                rec.dim,
                rec.degenerate as u8,
                rec.kstar,
                rec.r,
                rec.g23
            );
            for s in &rec.sigma {
                line.push_str(&format!(",{s}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    })?;
    Ok(records)
}

/// How far g23 fell between its pre-reference peak and the window nearest
/// the reference step.
#[derive(Debug, Clone, Copy)]
pub struct G23Decline {
    pub early_peak: f64,
    pub at_reference: f64,
    /// early_peak / at_reference; infinite when the reference window's g23
    /// is exactly zero.
    pub factor: f64,
}

/// Compares the largest g23 among windows ending before `reference_step`
/// (for a grokked run, its grok step; for a control, the grok step of its
/// matched twin) against the g23 of the window ending nearest the reference,
/// ties toward earlier. None when no window ends before the reference.
pub fn g23_decline(records: &[GramRecord], reference_step: u64) -> Option<G23Decline> {
    let early_peak = records
        .iter()
        .filter(|r| r.end_step < reference_step)
        .map(|r| r.g23)
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))?;
    let nearest = records.iter().min_by_key(|r| {
        let d = r.end_step.abs_diff(reference_step);
        (d, r.end_step)
    })?;
    let at_reference = nearest.g23;
    let factor = if at_reference == 0.0 { f64::INFINITY } else { early_peak / at_reference };
    Some(G23Decline { early_peak, at_reference, factor })
}

/// Mean gap ratio over windows ending before `reference_step`. Windows whose
/// ratio is non-finite (exactly rank-deficient) carry no gap information and
/// are skipped. None when nothing finite precedes the reference.
pub fn early_gap_ratio(records: &[GramRecord], reference_step: u64) -> Option<f64> {
    let early: Vec<f64> = records
        .iter()
        .filter(|r| r.end_step < reference_step && r.r.is_finite())
        .map(|r| r.r)
        .collect();
    (!early.is_empty()).then(|| early.iter().sum::<f64>() / early.len() as f64)
}
