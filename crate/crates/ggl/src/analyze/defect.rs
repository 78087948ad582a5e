//! Update-commutator measurement.
//!
//! For two gradient-descent update maps Phi_X(theta) = theta - eta grad
//! L_X(theta), the defect delta = Phi_B(Phi_A(theta)) - Phi_A(Phi_B(theta))
//! is zero exactly when the two updates commute. Its norm tracks how far the
//! local loss geometry is from admitting order-independent progress, and its
//! direction can be compared against the principal trajectory subspace.

use crate::error::Result;

/// The two gradient fields whose update maps are being compared. A single
/// object rather than two closures, so one set of evaluation buffers can
/// back both sides.
pub trait GradPair {
    fn grad_a(&mut self, theta: &[f64], out: &mut [f64]) -> Result<()>;
    fn grad_b(&mut self, theta: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Two independent closures form a pair.
impl<F, G> GradPair for (F, G)
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
    G: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    fn grad_a(&mut self, theta: &[f64], out: &mut [f64]) -> Result<()> {
        (self.0)(theta, out)
    }
    fn grad_b(&mut self, theta: &[f64], out: &mut [f64]) -> Result<()> {
        (self.1)(theta, out)
    }
}

/// delta = Phi_B(Phi_A(theta)) - Phi_A(Phi_B(theta)) with plain GD steps of
/// size `eta`. Four gradient evaluations: each loss at theta and at the
/// other loss's updated point.
pub fn update_commutator(theta: &[f64], pair: &mut impl GradPair, eta: f64) -> Result<Vec<f64>> {
    let p = theta.len();
    let mut g = vec![0.0; p];
    let mut theta_a = theta.to_vec();
    let mut theta_b = theta.to_vec();

    pair.grad_a(theta, &mut g)?;
    for i in 0..p {
        theta_a[i] -= eta * g[i];
    }
    pair.grad_b(theta, &mut g)?;
    for i in 0..p {
        theta_b[i] -= eta * g[i];
    }

    // theta_a becomes Phi_B(Phi_A(theta)) in place.
    pair.grad_b(&theta_a, &mut g)?;
    for i in 0..p {
        theta_a[i] -= eta * g[i];
    }
    pair.grad_a(&theta_b, &mut g)?;
    for i in 0..p {
        theta_a[i] -= theta_b[i] - eta * g[i];
    }
    Ok(theta_a)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Fraction of `delta` orthogonal to the span of `basis` (orthonormal
/// columns): ||delta - B B^T delta|| / ||delta||. Near 1 means the defect
/// leaves the subspace untouched; near 0 means it lives inside it.
pub fn orthogonal_fraction(delta: &[f64], basis: &[Vec<f64>]) -> f64 {
    let total = norm(delta);
    if total == 0.0 {
        return 0.0;
    }
    let mut in_span_sq = 0.0;
    for col in basis {
        debug_assert_eq!(col.len(), delta.len());
        let c: f64 = col.iter().zip(delta).map(|(b, d)| b * d).sum();
        in_span_sq += c * c;
    }
    // ||delta - BB^T delta||^2 = ||delta||^2 - ||B^T delta||^2 for
    // orthonormal B; clamp against cancellation.
    let out_sq = (total * total - in_span_sq).max(0.0);
    out_sq.sqrt() / total
}

/// First step whose value reaches `c` times the rolling median of the
/// trailing `window` values. The median excludes the current value, so a
/// single spike cannot raise its own baseline.
pub fn detect_onset(steps: &[u64], values: &[f64], c: f64, window: usize) -> Option<u64> {
    assert_eq!(steps.len(), values.len());
    if window == 0 || values.len() <= window {
        return None;
    }
    let mut sorted = Vec::with_capacity(window);
    for i in window..values.len() {
        sorted.clear();
        sorted.extend_from_slice(&values[i - window..i]);
        sorted.sort_by(|a, b| a.total_cmp(b));
        let median = if window % 2 == 1 {
            sorted[window / 2]
        } else {
            0.5 * (sorted[window / 2 - 1] + sorted[window / 2])
        };
        if median > 0.0 && values[i] >= c * median {
            return Some(steps[i]);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    /// grad of 0.5 theta^T H theta + b^T theta.
    fn quad_grad<'a>(
        h: &'a [Vec<f64>],
        b: &'a [f64],
    ) -> impl FnMut(&[f64], &mut [f64]) -> Result<()> + 'a {
        move |theta, out| {
            for i in 0..theta.len() {
                out[i] = b[i] + h[i].iter().zip(theta).map(|(hij, tj)| hij * tj).sum::<f64>();
            }
            Ok(())
        }
    }

    fn sym(n: usize, f: impl Fn(usize, usize) -> f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..n).map(|j| 0.5 * (f(i, j) + f(j, i))).collect())
            .collect()
    }

    #[test]
    fn quadratic_losses_match_the_closed_form() {
        // For quadratics the defect is exactly
        // eta^2 ([H_B, H_A] theta + H_B b_A - H_A b_B).
        let n = 6;
        let ha = sym(n, |i, j| ((i * 7 + j * 3) % 11) as f64 * 0.1 - 0.3);
        let hb = sym(n, |i, j| ((i * 5 + j * 13) % 9) as f64 * 0.2 - 0.5);
        let ba: Vec<f64> = (0..n).map(|i| 0.3 * i as f64 - 0.7).collect();
        let bb: Vec<f64> = (0..n).map(|i| -0.2 * i as f64 + 0.4).collect();
        let theta: Vec<f64> = (0..n).map(|i| 0.1 * i as f64 + 0.05).collect();
        let eta = 1e-3;

        let mut pair = (quad_grad(&ha, &ba), quad_grad(&hb, &bb));
        let delta = update_commutator(&theta, &mut pair, eta).unwrap();

        let mat = |m: &[Vec<f64>], v: &[f64]| -> Vec<f64> {
            m.iter()
                .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
                .collect()
        };
        let hbha_t = mat(&hb, &mat(&ha, &theta));
        let hahb_t = mat(&ha, &mat(&hb, &theta));
        let hb_ba = mat(&hb, &ba);
        let ha_bb = mat(&ha, &bb);
        for i in 0..n {
            let expected = eta * eta * (hbha_t[i] - hahb_t[i] + hb_ba[i] - ha_bb[i]);
            assert!(
                (delta[i] - expected).abs() <= 1e-12 * (1.0 + expected.abs()),
                "component {i}: {} vs {expected}",
                delta[i]
            );
        }
    }

    #[test]
    fn swapping_losses_negates_the_defect() {
        let n = 5;
        let ha = sym(n, |i, j| (i + 2 * j) as f64 * 0.11);
        let hb = sym(n, |i, j| (3 * i + j) as f64 * 0.07 - 0.2);
        let ba = vec![0.1; n];
        let bb = vec![-0.3; n];
        let theta: Vec<f64> = (0..n).map(|i| i as f64 * 0.2 - 0.4).collect();

        let d_ab = update_commutator(
            &theta,
            &mut (quad_grad(&ha, &ba), quad_grad(&hb, &bb)),
            1e-2,
        )
        .unwrap();
        let d_ba = update_commutator(
            &theta,
            &mut (quad_grad(&hb, &bb), quad_grad(&ha, &ba)),
            1e-2,
        )
        .unwrap();
        for i in 0..n {
            assert!(
                (d_ab[i] + d_ba[i]).abs() <= 1e-15 * d_ab[i].abs().max(1.0),
                "antisymmetry broken at {i}"
            );
        }
    }

    #[test]
    fn defect_scales_as_eta_squared() {
        // Non-polynomial losses so no order cancels exactly; halving eta
        // should shrink the norm by about 4.
        let ga = |theta: &[f64], out: &mut [f64]| -> Result<()> {
            for i in 0..theta.len() {
                out[i] = (theta[i] * (i as f64 + 1.0)).sin() + 0.3 * theta[(i + 1) % theta.len()];
            }
            Ok(())
        };
        let gb = |theta: &[f64], out: &mut [f64]| -> Result<()> {
            for i in 0..theta.len() {
                out[i] = (theta[i] + 0.2 * (i as f64)).cos() * theta[i] - 0.1;
            }
            Ok(())
        };
        let theta: Vec<f64> = (0..8).map(|i| 0.3 + 0.1 * i as f64).collect();
        let big = norm(&update_commutator(&theta, &mut (ga, gb), 2e-3).unwrap());
        let small = norm(&update_commutator(&theta, &mut (ga, gb), 1e-3).unwrap());
        let ratio = big / small;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn orthogonal_fraction_spans_its_extremes() {
        let e0 = vec![1.0, 0.0, 0.0, 0.0];
        let e1 = vec![0.0, 1.0, 0.0, 0.0];
        let basis = vec![e0.clone(), e1.clone()];
        assert!(orthogonal_fraction(&[0.0, 3.0, 0.0, 0.0], &basis) < 1e-12);
        assert!((orthogonal_fraction(&[0.0, 0.0, 0.0, 2.0], &basis) - 1.0).abs() < 1e-12);
        let mixed = orthogonal_fraction(&[1.0, 0.0, 1.0, 0.0], &basis);
        assert!((mixed - (0.5f64).sqrt()).abs() < 1e-12);
        assert_eq!(orthogonal_fraction(&[0.0; 4], &basis), 0.0);
    }

    #[test]
    fn onset_triggers_on_sustained_rise_not_noise() {
        let window = 20;
        let mut steps = Vec::new();
        let mut values = Vec::new();
        for i in 0..60u64 {
            steps.push(i * 100);
            // Flat noisy baseline around 1.0, then growth from index 40.
            let base = 1.0 + 0.05 * ((i * 37 % 11) as f64 - 5.0) / 5.0;
            let v = if i >= 40 { base * 1.6f64.powi(i as i32 - 39) } else { base };
            values.push(v);
        }
        let onset = detect_onset(&steps, &values, 5.0, window).unwrap();
        assert!(
            (4000..=4600).contains(&onset),
            "onset {onset} should land shortly after growth begins"
        );
        // A single spike below the factor never fires.
        let mut quiet = vec![1.0; 60];
        quiet[30] = 3.0;
        assert_eq!(detect_onset(&steps, &quiet, 5.0, window), None);
        // Too little history never fires.
        assert_eq!(detect_onset(&steps[..10], &values[..10], 5.0, window), None);
    }
}
