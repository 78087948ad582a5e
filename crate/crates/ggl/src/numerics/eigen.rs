//! Extreme-eigenvalue probes for symmetric linear maps.
//!
//! The maps of interest are loss Hessians reachable only through
//! Hessian-vector products, so the probe is matrix-free power iteration. The
//! minimum mode runs a spectral shift: estimate lambda_max first, then iterate
//! on (shift*I - H), because mid-training Hessians have |lambda_min| well
//! below lambda_max and plain iteration on -H would return -lambda_max.
//!
//! `jacobi_eigen_symmetric` is a small dense eigensolver kept as the
//! independent cross-check for the matrix-free path (and for test oracles).

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};
use crate::numerics::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtremeMode {
    Min,
    Max,
}

#[derive(Debug, Clone)]
pub struct EigenEstimate {
    pub value: f64,
    /// Unit eigenvector estimate.
    pub vector: Vec<f64>,
    /// ||H v - value * v|| at the returned pair.
    pub residual: f64,
    /// Total map applications consumed (both phases for mode=min).
    pub applications: usize,
    /// Whether the residual criterion was met before the iteration cap.
    pub converged: bool,
}

/// Extreme eigenvalue of a symmetric map given only `apply: v -> H v`.
///
/// `iters` caps the iterations of each power-iteration phase. The residual
/// target is `tol * max(1, |lambda|)`; hitting the cap is reported via
/// `converged`, never silently.
pub fn extreme_eigenvalue(
    apply: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    dim: usize,
    mode: ExtremeMode,
    iters: usize,
    tol: f64,
    rng: &mut SeededRng,
) -> Result<EigenEstimate> {
    if dim == 0 {
        return Err(Error::numerical("extreme_eigenvalue: dim must be >= 1"));
    }
    if iters == 0 {
        return Err(Error::numerical("extreme_eigenvalue: iters must be >= 1"));
    }
    // Phase 1: plain power iteration converges to the largest-magnitude
    // eigenvalue. Its sign decides whether a shifted second phase is needed:
    // the extreme we want may sit at the other end of the spectrum.
    let dominant = power_iterate(apply, dim, iters, tol, rng, Shift::None)?;
    let margin = 0.01 * dominant.value.abs().max(1.0);
    let (shift, phase1_suffices) = match mode {
        // lambda_max: if the dominant eigenvalue is negative it IS lambda_min;
        // iterate on H - s*I with s below it so the spectrum is positive.
        ExtremeMode::Max => (dominant.value - margin, dominant.value >= 0.0),
        // lambda_min: a negative dominant IS lambda_min; otherwise iterate on
        // s*I - H with s above lambda_max.
        ExtremeMode::Min => (dominant.value + margin, dominant.value < 0.0),
    };
    if phase1_suffices {
        return Ok(dominant);
    }
    let phase2 = match mode {
        ExtremeMode::Max => power_iterate(apply, dim, iters, tol, rng, Shift::HMinus(shift))?,
        ExtremeMode::Min => power_iterate(apply, dim, iters, tol, rng, Shift::MinusH(shift))?,
    };
    let value = match mode {
        ExtremeMode::Max => shift + phase2.value,
        ExtremeMode::Min => shift - phase2.value,
    };
    // Residual re-measured on the original map.
    let hv = apply(&phase2.vector);
    let residual = hv
        .iter()
        .zip(&phase2.vector)
        .map(|(h, v)| (h - value * v) * (h - value * v))
        .sum::<f64>()
        .sqrt();
    Ok(EigenEstimate {
        value,
        vector: phase2.vector,
        residual,
        applications: dominant.applications + phase2.applications + 1,
        converged: phase2.converged && residual <= tol * value.abs().max(1.0),
    })
}

#[derive(Clone, Copy)]
enum Shift {
    /// Iterate on H itself.
    None,
    /// Iterate on H - s*I (pushes a negative spectrum positive).
    HMinus(f64),
    /// Iterate on s*I - H (flips the spectrum around s).
    MinusH(f64),
}

/// Power iteration on the (possibly shifted) operator. Returns the dominant
/// eigenpair of the iterated operator.
fn power_iterate(
    apply: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    dim: usize,
    iters: usize,
    tol: f64,
    rng: &mut SeededRng,
    shift: Shift,
) -> Result<EigenEstimate> {
    let operator = |apply: &mut dyn FnMut(&[f64]) -> Vec<f64>, v: &[f64]| -> Vec<f64> {
        let hv = apply(v);
        match shift {
            Shift::None => hv,
            Shift::HMinus(s) => hv.iter().zip(v).map(|(h, x)| h - s * x).collect(),
            Shift::MinusH(s) => hv.iter().zip(v).map(|(h, x)| s * x - h).collect(),
        }
    };

    let mut applications = 0usize;
    for _restart in 0..3 {
        let mut v = random_unit(dim, rng);
        let mut value = 0.0;
        let mut residual = f64::INFINITY;
        let mut degenerate = false;
        for _ in 0..iters {
            let w = operator(apply, &v);
            applications += 1;
            value = dot(&v, &w);
            residual = w
                .iter()
                .zip(&v)
                .map(|(wi, vi)| (wi - value * vi) * (wi - value * vi))
                .sum::<f64>()
                .sqrt();
            if residual <= tol * value.abs().max(1.0) {
                return Ok(EigenEstimate {
                    value,
                    vector: v,
                    residual,
                    applications,
                    converged: true,
                });
            }
            let n = norm(&w);
            if n == 0.0 || !n.is_finite() {
                // Iterate collapsed (start vector effectively in the kernel,
                // or a non-finite map value): restart from a fresh vector.
                degenerate = true;
                break;
            }
            v = w.iter().map(|x| x / n).collect();
        }
        if !degenerate {
            // Cap reached on a healthy iteration: report the best estimate.
            return Ok(EigenEstimate {
                value,
                vector: v,
                residual,
                applications,
                converged: false,
            });
        }
    }
    Err(Error::numerical(
        "power iteration: degenerate start vector after 3 restarts",
    ))
}

fn random_unit(dim: usize, rng: &mut SeededRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Dense symmetric eigendecomposition by cyclic two-sided Jacobi.
/// Returns (eigenvalues, eigenvectors as columns), unsorted.
/// Intended for small matrices (oracles, Gram matrices of window size ~10).
pub fn jacobi_eigen_symmetric(m: &DenseMatrix) -> (Vec<f64>, DenseMatrix) {
    assert_eq!(m.rows(), m.cols(), "symmetric eigensolver needs square input");
    let n = m.rows();
    let mut a = m.clone();
    let mut v = DenseMatrix::identity(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q).abs();
            }
        }
        if off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= f64::EPSILON * (a.get(p, p).abs() + a.get(q, q).abs()).max(1e-300) {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                // A <- J^T A J on rows/columns p, q.
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let eigs = (0..n).map(|i| a.get(i, i)).collect();
    (eigs, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix_apply(m: &DenseMatrix) -> impl FnMut(&[f64]) -> Vec<f64> + '_ {
        move |v: &[f64]| {
            (0..m.rows())
                .map(|i| m.row(i).iter().zip(v).map(|(a, x)| a * x).sum())
                .collect()
        }
    }

    fn random_symmetric(n: usize, rng: &mut SeededRng) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let x = rng.standard_normal();
                m.set(i, j, x);
                m.set(j, i, x);
            }
        }
        m
    }

    #[test]
    fn diagonal_min_and_max() {
        let m = DenseMatrix::from_vec(3, 3, vec![3., 0., 0., 0., 1., 0., 0., 0., -5.]);
        let mut rng = SeededRng::new(0, "eig");
        let mut apply = matrix_apply(&m);
        let max = extreme_eigenvalue(&mut apply, 3, ExtremeMode::Max, 500, 1e-10, &mut rng).unwrap();
        assert!((max.value - 3.0).abs() < 1e-6, "max {}", max.value);
        let mut rng = SeededRng::new(0, "eig");
        let mut apply = matrix_apply(&m);
        let min = extreme_eigenvalue(&mut apply, 3, ExtremeMode::Min, 500, 1e-10, &mut rng).unwrap();
        assert!((min.value - (-5.0)).abs() < 1e-6, "min {}", min.value);
    }

    #[test]
    fn random_symmetric_matches_dense_oracle() {
        let mut rng = SeededRng::new(23, "eig-oracle");
        let m = random_symmetric(12, &mut rng);
        let (eigs, _) = jacobi_eigen_symmetric(&m);
        let oracle_min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        let oracle_max = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

        let mut stream = SeededRng::new(23, "power");
        let mut apply = matrix_apply(&m);
        let min =
            extreme_eigenvalue(&mut apply, 12, ExtremeMode::Min, 50_000, 1e-12, &mut stream)
                .unwrap();
        assert!(
            (min.value - oracle_min).abs() < 1e-6,
            "min {} vs oracle {}",
            min.value,
            oracle_min
        );
        let mut stream = SeededRng::new(24, "power");
        let mut apply = matrix_apply(&m);
        let max =
            extreme_eigenvalue(&mut apply, 12, ExtremeMode::Max, 50_000, 1e-12, &mut stream)
                .unwrap();
        assert!((max.value - oracle_max).abs() < 1e-6);
    }

    #[test]
    fn psd_map_min_is_nonnegative() {
        // H = B^T B is PSD; the min mode must not report anything below -tol.
        let mut rng = SeededRng::new(31, "psd");
        let b = {
            let mut m = DenseMatrix::zeros(6, 6);
            for i in 0..6 {
                for j in 0..6 {
                    m.set(i, j, rng.standard_normal());
                }
            }
            m
        };
        let h = b.transpose().matmul(&b);
        let tol = 1e-8;
        let mut stream = SeededRng::new(31, "power");
        let mut apply = matrix_apply(&h);
        let min = extreme_eigenvalue(&mut apply, 6, ExtremeMode::Min, 100_000, tol, &mut stream)
            .unwrap();
        assert!(min.value >= -tol, "PSD min {}", min.value);
    }

    #[test]
    fn jacobi_known_two_by_two() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3.
        let m = DenseMatrix::from_vec(2, 2, vec![2., 1., 1., 2.]);
        let (mut eigs, v) = jacobi_eigen_symmetric(&m);
        eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((eigs[0] - 1.0).abs() < 1e-12);
        assert!((eigs[1] - 3.0).abs() < 1e-12);
        // Eigenvectors stay orthonormal.
        let dot = v.get(0, 0) * v.get(0, 1) + v.get(1, 0) * v.get(1, 1);
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn reports_cap_when_unconverged() {
        let mut rng = SeededRng::new(2, "cap");
        let m = random_symmetric(8, &mut rng);
        let mut stream = SeededRng::new(2, "power");
        let mut apply = matrix_apply(&m);
        let est =
            extreme_eigenvalue(&mut apply, 8, ExtremeMode::Max, 2, 1e-15, &mut stream).unwrap();
        assert!(!est.converged);
        assert!(est.residual.is_finite());
    }
}
