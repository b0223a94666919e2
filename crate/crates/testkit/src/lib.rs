//! Reference computations used only by tests.
//!
//! Nothing here depends on `fisar-core`: matrices are plain row-major slices
//! and every routine goes through `nalgebra` or brute force, so agreement
//! with the library is evidence rather than tautology.

pub use nalgebra;
use nalgebra::{DMatrix, DVector};

pub fn to_dmatrix(rows: usize, cols: usize, row_major: &[f64]) -> DMatrix<f64> {
    assert_eq!(row_major.len(), rows * cols);
    DMatrix::from_row_slice(rows, cols, row_major)
}

/// `δI + Aᵀ(AAᵀ)⁻¹(I − δAAᵀ)(AAᵀ)⁻¹A`, expanded literally.
pub fn designed_q_inv(a: &DMatrix<f64>, delta: f64) -> DMatrix<f64> {
    let (m, n) = a.shape();
    let g = a * a.transpose();
    let g_inv = g.clone().try_inverse().expect("Gram matrix invertible");
    let mid = &g_inv * (DMatrix::identity(m, m) - g * delta) * &g_inv;
    DMatrix::identity(n, n) * delta + a.transpose() * mid * a
}

/// Ascending eigenvalues of a symmetric matrix.
pub fn sym_eigenvalues(s: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = s.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(f64::total_cmp);
    sv
}

/// Minimizer of `½(x−x0)ᵀQ(x−x0)` subject to `Ax ≤ b` by enumerating all
/// `2^m` active sets and solving each equality-constrained KKT system.
///
/// Among candidates that are primal feasible and have non-negative
/// multipliers (both within `tol`), the one with the smallest objective is
/// returned; for a strictly convex objective there is exactly one.
pub fn active_set_qp(q: &DMatrix<f64>, x0: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> Option<DVector<f64>> {
    let (m, n) = a.shape();
    assert!(m <= 16, "exhaustive enumeration");
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = active.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(q);
        rhs.rows_mut(0, n).copy_from(&(q * x0));
        for (r, &i) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = a[(i, j)];
                kkt[(j, n + r)] = a[(i, j)];
            }
            rhs[n + r] = b[i];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let mu = sol.rows(n, k);
        if mu.iter().any(|&v| v < -tol) {
            continue;
        }
        let slack = a * &x - b;
        if slack.iter().any(|&s| s > tol) {
            continue;
        }
        let d = &x - x0;
        let obj = 0.5 * d.dot(&(q * &d));
        if best.as_ref().is_none_or(|(o, _)| obj < *o) {
            best = Some((obj, x));
        }
    }
    best.map(|(_, x)| x)
}

/// Central-difference gradient of `f` at `x`.
pub fn central_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central-difference directional derivative of a vector map.
pub fn central_directional(mut f: impl FnMut(&[f64]) -> Vec<f64>, x: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    let up: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let down: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
    f(&up).iter().zip(f(&down)).map(|(u, d)| (u - d) / (2.0 * h)).collect()
}

/// `‖a − b‖∞ / max(‖b‖∞, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(floor, f64::max);
    diff / scale
}

/// `max_ij |(B − S X)_ij|` with each entry accumulated as an exact
/// double-double sum, so the measurement adds no error of its own beyond
/// the final rounding.
pub fn exact_residual_max(s: &[f64], x: &[f64], b: &[f64], n: usize, k: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..k {
            let (mut hi, mut lo) = (b[i * k + j], 0.0f64);
            for l in 0..n {
                let p = -s[i * n + l] * x[l * k + j];
                let e = (-s[i * n + l]).mul_add(x[l * k + j], -p);
                let (sum, err) = two_sum(hi, p);
                hi = sum;
                lo += err + e;
            }
            worst = worst.max((hi + lo).abs());
        }
    }
    worst
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qp_oracle_on_hand_example() {
        let a = to_dmatrix(1, 2, &[1.0, 0.0]);
        let q = designed_q_inv(&a, 0.5).try_inverse().unwrap();
        let x = active_set_qp(&q, &DVector::from_vec(vec![2.0, 3.0]), &a, &DVector::from_vec(vec![0.0]), 1e-12).unwrap();
        assert!((x[0]).abs() < 1e-12 && (x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn fd_of_quadratic() {
        let g = central_gradient(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 1.0], 1e-6);
        assert!(rel_err(&g, &[4.0, 3.0], 1.0) < 1e-8);
    }
}
