//! Thin SVD via one-sided (Hestenes) Jacobi.
//!
//! One-sided Jacobi orthogonalizes the columns of the input by plane
//! rotations. It is slower than bidiagonalization at scale but has high
//! relative accuracy on small singular values, which the trajectory analyses
//! depend on: the 1e-8 orthonormality contract must hold even for directions
//! whose singular values sit many orders below sigma_1. Everything is f64.

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SvdResult {
    /// rows x k, orthonormal columns (k = min(rows, cols)).
    pub left_vectors: DenseMatrix,
    /// Descending, non-negative, length k.
    pub singular_values: Vec<f64>,
    /// cols x k, orthonormal columns.
    pub right_vectors: DenseMatrix,
}

impl SvdResult {
    pub fn rank(&self, rel_tol: f64) -> usize {
        let floor = self.singular_values.first().copied().unwrap_or(0.0) * rel_tol;
        self.singular_values.iter().filter(|&&s| s > floor).count()
    }

    /// U * diag(sigma) * V^T, for reconstruction checks.
    pub fn reconstruction(&self) -> DenseMatrix {
        let (m, k) = (self.left_vectors.rows(), self.singular_values.len());
        let n = self.right_vectors.rows();
        let mut out = DenseMatrix::zeros(m, n);
        for i in 0..m {
            let o = out.row_mut(i);
            for j in 0..k {
                let u = self.left_vectors.get(i, j) * self.singular_values[j];
                if u == 0.0 {
                    continue;
                }
                for (c, oj) in o.iter_mut().enumerate() {
                    *oj += u * self.right_vectors.get(c, j);
                }
            }
        }
        out
    }
}

/// Orthogonality threshold for skipping a rotation, relative to column norms.
const ROTATION_TOL: f64 = 1e-13;
const MAX_SWEEPS: usize = 60;

/// Thin SVD of an arbitrary finite matrix. `m = U diag(sigma) V^T` with the
/// reconstruction error below `1e-8 * ||m||_F`.
pub fn thin_svd(m: &DenseMatrix) -> Result<SvdResult> {
    m.check_finite()
        .map_err(|e| Error::numerical(format!("thin_svd input: {e}")))?;
    if m.rows().min(m.cols()) == 0 {
        return Err(Error::numerical("thin_svd: empty matrix"));
    }
    // Work on the tall orientation so we orthogonalize min(rows, cols) columns.
    if m.rows() >= m.cols() {
        let (u, s, v) = jacobi_columns(m.clone());
        Ok(SvdResult {
            left_vectors: u,
            singular_values: s,
            right_vectors: v,
        })
    } else {
        let (u, s, v) = jacobi_columns(m.transpose());
        Ok(SvdResult {
            left_vectors: v,
            singular_values: s,
            right_vectors: u,
        })
    }
}

/// Core routine on a tall matrix `a` (rows >= cols). Returns (U, sigma, V)
/// with U: rows x cols, V: cols x cols.
fn jacobi_columns(a: DenseMatrix) -> (DenseMatrix, Vec<f64>, DenseMatrix) {
    let n = a.cols();
    // Column-major working copy: rotations touch column pairs contiguously.
    let rows = a.rows();
    let mut col: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..rows).map(|i| a.get(i, j)).collect())
        .collect();
    drop(a);

    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _sweep in 0..MAX_SWEEPS {
        // Column squared norms, refreshed per sweep, updated per rotation.
        let mut sq: Vec<f64> =
            col.iter().map(|c| c.iter().map(|x| x * x).sum()).collect();
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let gamma: f64 = col[p].iter().zip(&col[q]).map(|(x, y)| x * y).sum();
                let (alpha, beta) = (sq[p], sq[q]);
                if gamma.abs() <= ROTATION_TOL * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (cp, cq) = split_pair(&mut col, p, q);
                rotate(cp, cq, c, s);
                let (vp, vq) = split_pair(&mut v, p, q);
                rotate(vp, vq, c, s);
                sq[p] = alpha - t * gamma;
                sq[q] = beta + t * gamma;
            }
        }
        if !rotated {
            break;
        }
    }

    // Extract singular values and sort descending (stable in column index).
    let mut sigma: Vec<f64> = col
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap().then(i.cmp(&j)));
    let col_sorted: Vec<Vec<f64>> = order.iter().map(|&i| std::mem::take(&mut col[i])).collect();
    let v_sorted: Vec<Vec<f64>> = order.iter().map(|&i| std::mem::take(&mut v[i])).collect();
    sigma = order.iter().map(|&i| sigma[i]).collect();

    // Normalize U columns; columns with negligible sigma get a deterministic
    // orthonormal completion so U^T U = I holds at any rank.
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let tiny = f64::EPSILON * sigma_max * rows.max(n) as f64;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (j, c) in col_sorted.into_iter().enumerate() {
        if sigma[j] > tiny && sigma[j] > 0.0 {
            let inv = 1.0 / sigma[j];
            u_cols.push(c.iter().map(|x| x * inv).collect());
        } else {
            u_cols.push(complete_column(&u_cols, rows));
        }
    }

    let mut u = DenseMatrix::zeros(rows, n);
    for (j, cj) in u_cols.iter().enumerate() {
        for (i, &x) in cj.iter().enumerate() {
            u.set(i, j, x);
        }
    }
    let mut vm = DenseMatrix::zeros(n, n);
    for (j, vj) in v_sorted.iter().enumerate() {
        for (i, &x) in vj.iter().enumerate() {
            vm.set(i, j, x);
        }
    }
    (u, sigma, vm)
}

fn split_pair<'a>(cols: &'a mut [Vec<f64>], p: usize, q: usize) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(p < q);
    let (lo, hi) = cols.split_at_mut(q);
    (&mut lo[p], &mut hi[0])
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (xi, yi) in x.iter_mut().zip(y.iter_mut()) {
        let (a, b) = (*xi, *yi);
        *xi = c * a - s * b;
        *yi = s * a + c * b;
    }
}

/// First canonical basis vector with a large component orthogonal to the
/// existing columns, normalized. Deterministic.
fn complete_column(existing: &[Vec<f64>], rows: usize) -> Vec<f64> {
    for seed in 0..rows {
        let mut cand = vec![0.0; rows];
        cand[seed] = 1.0;
        for col in existing {
            let proj: f64 = cand.iter().zip(col).map(|(x, y)| x * y).sum();
            for (ci, &yi) in cand.iter_mut().zip(col) {
                *ci -= proj * yi;
            }
        }
        let norm: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            for ci in &mut cand {
                *ci /= norm;
            }
            return cand;
        }
    }
    // rows >= number of columns, so some canonical vector always survives.
    unreachable!("orthonormal completion exhausted the canonical basis");
}
