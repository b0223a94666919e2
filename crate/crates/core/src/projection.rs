//! Closed-form projection onto `{x : Ax ≤ b}`.
//!
//! The projection `min ½(x−x₀)ᵀQ(x−x₀) s.t. Ax ≤ b` has the dual
//! `min_{λ≥0} ½λᵀAQ⁻¹Aᵀλ + λᵀ(b − Ax₀)`. Choosing
//!
//! ```text
//! Q⁻¹ = δI + Aᵀ(AAᵀ)⁻¹(I − δAAᵀ)(AAᵀ)⁻¹A
//! ```
//!
//! makes `AQ⁻¹Aᵀ = I`, so the dual separates per constraint and
//! `λ = max(0, Ax₀ − b)`, `x = x₀ − Q⁻¹Aᵀλ`. On the null space of `A` the
//! metric acts as `δI`; on the row space its eigenvalues are `1/σᵢ²`.
//!
//! `Q⁻¹` is never formed in the hot path. [`ProjectionMetric`] keeps `A` and
//! the Cholesky factor of `AAᵀ` and applies `Q⁻¹` in `O(mn + m²)`.

use crate::error::{Error, Result};
use crate::ndcore::{Cholesky, Matrix, Vector};

/// Smallest accepted ratio between Gram Cholesky pivots, a proxy for
/// `σ_min(A) / σ_max(A)`.
pub const RANK_TOLERANCE: f64 = 1e-8;

pub const DEFAULT_DELTA: f64 = 1.0;

/// Residual corrections applied after the closed-form projection.
const REFINEMENT_ROUNDS: usize = 2;

/// Cholesky factor of `AAᵀ`, rejecting numerically rank-deficient `A`.
pub fn gram_factor(a: &Matrix) -> Result<Cholesky> {
    if a.rows() > a.cols() {
        return Err(Error::RankDeficient(format!("{} rows exceed {} columns", a.rows(), a.cols())));
    }
    let gram = Cholesky::factor(&a.gram()).map_err(|e| Error::RankDeficient(format!("Gram matrix is singular: {e}")))?;
    let pivots = gram.pivots();
    if !pivots.is_empty() {
        let hi = pivots.iter().cloned().fold(0.0, f64::max);
        let lo = pivots.iter().cloned().fold(f64::INFINITY, f64::min);
        if lo <= RANK_TOLERANCE * hi {
            return Err(Error::RankDeficient(format!("pivot ratio {:e} below {RANK_TOLERANCE:e}", lo / hi)));
        }
    }
    Ok(gram)
}

/// `{x : Ax ≤ b}` with `A` of shape `m×n`, `m ≤ n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Polytope {
    a: Matrix,
    b: Vector,
}

impl Polytope {
    pub fn new(a: Matrix, b: Vector) -> Result<Self> {
        if a.rows() != b.len() {
            return Err(Error::DimensionMismatch(format!("A has {} rows but b has {} entries", a.rows(), b.len())));
        }
        if a.rows() > a.cols() {
            return Err(Error::RankDeficient(format!("{} constraints on {} variables", a.rows(), a.cols())));
        }
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFiniteInput("polytope data".into()));
        }
        Ok(Polytope { a, b })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Vector {
        &self.b
    }

    /// Number of constraints.
    pub fn m(&self) -> usize {
        self.a.rows()
    }

    /// Ambient dimension.
    pub fn n(&self) -> usize {
        self.a.cols()
    }

    /// Largest constraint excess `max_i (Ax − b)_i`, or `-inf` with no rows.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let ax = self.a.matvec(x);
        ax.iter().zip(self.b.iter()).map(|(l, r)| l - r).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.max_violation(x) <= tol
    }
}

/// Result of [`ProjectionMetric::project`].
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub x: Vector,
    pub lambda: Vector,
}

/// Factored form of the designed metric `Q⁻¹` for a fixed `A`.
#[derive(Clone, Debug)]
pub struct ProjectionMetric {
    delta: f64,
    a: Matrix,
    gram: Cholesky,
}

impl ProjectionMetric {
    /// Builds the metric for a full-row-rank `A`.
    pub fn build(a: &Matrix, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
        }
        if !a.is_finite() {
            return Err(Error::NonFiniteInput("constraint matrix".into()));
        }
        let gram = gram_factor(a)?;
        Ok(ProjectionMetric { delta, a: a.clone(), gram })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn constraint_matrix(&self) -> &Matrix {
        &self.a
    }

    pub fn m(&self) -> usize {
        self.a.rows()
    }

    pub fn n(&self) -> usize {
        self.a.cols()
    }

    /// `Q⁻¹ v = δv + Aᵀ G⁻¹(G⁻¹Av − δAv)` with `G = AAᵀ`.
    pub fn apply_q_inv(&self, v: &[f64]) -> Vector {
        assert_eq!(v.len(), self.n(), "apply_q_inv dimension mismatch");
        let mut out = Vector::from(v).scaled(self.delta);
        if self.m() == 0 {
            return out;
        }
        let av = self.a.matvec(v);
        let mut t = self.gram.solve_vec(&av);
        t.axpy(-self.delta, &av);
        let z = self.gram.solve_vec(&t);
        out.axpy(1.0, &self.a.tr_matvec(&z));
        out
    }

    /// Dense `Q⁻¹`, for inspection and tests.
    pub fn assemble_q_inv(&self) -> Matrix {
        let n = self.n();
        let mut q = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.apply_q_inv(&e);
            for i in 0..n {
                q[(i, j)] = col[i];
            }
            e[j] = 0.0;
        }
        q
    }

    fn check(&self, x0: &[f64], b: &[f64]) -> Result<()> {
        if x0.len() != self.n() || b.len() != self.m() {
            return Err(Error::DimensionMismatch(format!(
                "metric is {}x{}, got x0 of length {} and b of length {}",
                self.m(),
                self.n(),
                x0.len(),
                b.len()
            )));
        }
        Ok(())
    }

    /// Multipliers `λ = max(0, Ax₀ − b)`.
    fn multipliers(&self, x0: &[f64], b: &[f64]) -> Vector {
        self.a.matvec(x0).iter().zip(b).map(|(ax, bi)| (ax - bi).max(0.0)).collect()
    }

    /// Closed-form projection of `x0` onto `{x : Ax ≤ b}` under `Q`.
    pub fn project(&self, x0: &[f64], b: &[f64]) -> Result<Projection> {
        self.check(x0, b)?;
        let lambda = self.multipliers(x0, b);
        if lambda.iter().all(|&l| l == 0.0) {
            return Ok(Projection { x: Vector::from(x0), lambda });
        }
        let shift = self.apply_q_inv(&self.a.tr_matvec(&lambda));
        let mut x = Vector::from(x0).sub(&shift);
        // The exact solution has Ax = min(Ax₀, b). Since Q⁻¹Aᵀ = AᵀG⁻¹, a
        // residual correction along AᵀG⁻¹ stays on the closed-form path.
        let target: Vector = self.a.matvec(x0).iter().zip(b).map(|(ax, bi)| ax.min(*bi)).collect();
        for _ in 0..REFINEMENT_ROUNDS {
            let r = self.a.matvec(&x).sub(&target);
            if r.norm_inf() == 0.0 {
                break;
            }
            let fix = self.a.tr_matvec(&self.gram.solve_vec(&r));
            x.axpy(-1.0, &fix);
        }
        Ok(Projection { x, lambda })
    }

    /// Active-set mask `D`, with ties treated as inactive.
    fn active(&self, x0: &[f64], b: &[f64]) -> Vec<bool> {
        self.a.matvec(x0).iter().zip(b).map(|(ax, bi)| ax - bi > 0.0).collect()
    }

    /// Directional derivative of [`Self::project`] at `x0`:
    /// `(I − Q⁻¹AᵀDA) v`.
    pub fn project_jvp(&self, x0: &[f64], b: &[f64], v: &[f64]) -> Result<Vector> {
        self.check(x0, b)?;
        if v.len() != self.n() {
            return Err(Error::DimensionMismatch(format!("tangent of length {}", v.len())));
        }
        let active = self.active(x0, b);
        if !active.iter().any(|&a| a) {
            return Ok(Vector::from(v));
        }
        let dav: Vector = self.a.matvec(v).iter().zip(&active).map(|(x, &on)| if on { *x } else { 0.0 }).collect();
        Ok(Vector::from(v).sub(&self.apply_q_inv(&self.a.tr_matvec(&dav))))
    }

    /// Transposed derivative of [`Self::project`] at `x0`:
    /// `(I − AᵀDAQ⁻¹) u`.
    pub fn project_vjp(&self, x0: &[f64], b: &[f64], u: &[f64]) -> Result<Vector> {
        self.check(x0, b)?;
        if u.len() != self.n() {
            return Err(Error::DimensionMismatch(format!("cotangent of length {}", u.len())));
        }
        let active = self.active(x0, b);
        if !active.iter().any(|&a| a) {
            return Ok(Vector::from(u));
        }
        let qu = self.apply_q_inv(u);
        let daqu: Vector = self.a.matvec(&qu).iter().zip(&active).map(|(x, &on)| if on { *x } else { 0.0 }).collect();
        Ok(Vector::from(u).sub(&self.a.tr_matvec(&daqu)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn axis_constraint_metric() {
        let a = Matrix::from_rows(&[[1.0, 0.0]]);
        let q = ProjectionMetric::build(&a, 0.5).unwrap().assemble_q_inv();
        assert_abs_diff_eq!(q.as_slice(), [1.0, 0.0, 0.0, 0.5].as_slice(), epsilon = 1e-15);
    }

    #[test]
    fn scalar_metric() {
        let a = Matrix::from_rows(&[[2.0]]);
        let q = ProjectionMetric::build(&a, 0.25).unwrap().assemble_q_inv();
        assert_abs_diff_eq!(q[(0, 0)], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn orthonormal_rows_metric() {
        // AAᵀ = I reduces the metric to δI + (1−δ)AᵀA.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let a = Matrix::from_rows(&[[s, s, 0.0], [0.0, 0.0, 1.0]]);
        for delta in [0.1, 1.0, 3.0] {
            let q = ProjectionMetric::build(&a, delta).unwrap().assemble_q_inv();
            let expected = Matrix::identity(3).scaled(delta).add(&a.tr_matmul(&a).scaled(1.0 - delta));
            assert_abs_diff_eq!(q.as_slice(), expected.as_slice(), epsilon = 1e-14);
        }
    }

    #[test]
    fn axis_projection() {
        let a = Matrix::from_rows(&[[1.0, 0.0]]);
        let metric = ProjectionMetric::build(&a, 0.5).unwrap();
        let p = metric.project(&[2.0, 3.0], &[0.0]).unwrap();
        assert_eq!(p.lambda.as_slice(), &[2.0]);
        assert_abs_diff_eq!(p.x.as_slice(), [0.0, 3.0].as_slice(), epsilon = 1e-15);
    }

    #[test]
    fn scalar_projection() {
        let a = Matrix::from_rows(&[[2.0]]);
        let metric = ProjectionMetric::build(&a, 0.25).unwrap();
        let p = metric.project(&[4.0], &[2.0]).unwrap();
        assert_eq!(p.lambda.as_slice(), &[6.0]);
        assert_abs_diff_eq!(p.x[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn interior_point_is_fixed() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [-1.0, 0.5]]);
        let metric = ProjectionMetric::build(&a, 1.0).unwrap();
        let x0 = [0.1, -0.3];
        let p = metric.project(&x0, &[1.0, 1.0]).unwrap();
        assert_eq!(p.x.as_slice(), &x0);
        assert_eq!(p.lambda.as_slice(), &[0.0, 0.0]);
        assert_eq!(metric.project_jvp(&x0, &[1.0, 1.0], &[4.0, 5.0]).unwrap().as_slice(), &[4.0, 5.0]);
    }

    #[test]
    fn axis_jvp() {
        let a = Matrix::from_rows(&[[1.0, 0.0]]);
        let metric = ProjectionMetric::build(&a, 0.5).unwrap();
        let jv = metric.project_jvp(&[2.0, 3.0], &[0.0], &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(jv.as_slice(), [0.0, 1.0].as_slice(), epsilon = 1e-15);
    }

    #[test]
    fn tie_is_inactive() {
        let a = Matrix::from_rows(&[[1.0, 0.0]]);
        let metric = ProjectionMetric::build(&a, 0.5).unwrap();
        let jv = metric.project_jvp(&[0.0, 3.0], &[0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(jv.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn rank_deficiency_detected() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]]);
        assert!(matches!(ProjectionMetric::build(&a, 1.0), Err(Error::RankDeficient(_))));
        let wide = Matrix::from_rows(&[[1.0], [2.0]]);
        assert!(matches!(ProjectionMetric::build(&wide, 1.0), Err(Error::RankDeficient(_))));
        let zero = Matrix::zeros(1, 3);
        assert!(matches!(ProjectionMetric::build(&zero, 1.0), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn bad_delta_rejected() {
        let a = Matrix::from_rows(&[[1.0]]);
        assert!(ProjectionMetric::build(&a, 0.0).is_err());
        assert!(ProjectionMetric::build(&a, -1.0).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let a = Matrix::from_rows(&[[1.0, 0.0]]);
        let metric = ProjectionMetric::build(&a, 1.0).unwrap();
        assert!(matches!(metric.project(&[1.0], &[0.0]), Err(Error::DimensionMismatch(_))));
        assert!(matches!(metric.project(&[1.0, 2.0], &[0.0, 1.0]), Err(Error::DimensionMismatch(_))));
        assert!(matches!(metric.project_jvp(&[1.0, 2.0], &[0.0], &[1.0]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn no_constraints_is_identity() {
        let metric = ProjectionMetric::build(&Matrix::zeros(0, 3), 2.0).unwrap();
        let p = metric.project(&[1.0, 2.0, 3.0], &[]).unwrap();
        assert_eq!(p.x.as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(metric.assemble_q_inv(), Matrix::identity(3).scaled(2.0));
    }
}
