//! Lyapunov constraints on the update direction.
//!
//! For constraints `C_i(θ) ≤ 0`, a direction `θ̇` is admissible when
//! `∇C_i · θ̇ ≤ −α(C_i)` for every `i`. With `θ_{k+1} = θ_k + β θ̇_k` this
//! drives an infeasible `C_i` toward zero at rate `α` and keeps a feasible
//! one non-positive, up to discretization error of order `β²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{dot, Matrix, Vector};
use crate::projection::{gram_factor, Polytope, ProjectionMetric};

/// Rows whose cosine similarity exceeds this are treated as duplicates.
pub const DUPLICATE_COSINE: f64 = 1.0 - 1e-10;

/// Constraint values `C_i(θ)` and their gradients (one row per constraint).
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintEval {
    pub values: Vector,
    pub gradients: Matrix,
}

impl ConstraintEval {
    pub fn new(values: Vector, gradients: Matrix) -> Result<Self> {
        if values.len() != gradients.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} constraint values with {} gradient rows",
                values.len(),
                gradients.rows()
            )));
        }
        if !values.is_finite() || !gradients.is_finite() {
            return Err(Error::NonFiniteInput("constraint evaluation".into()));
        }
        Ok(ConstraintEval { values, gradients })
    }

    /// No constraints on an `n`-dimensional parameter.
    pub fn empty(n: usize) -> Self {
        ConstraintEval { values: Vector::zeros(0), gradients: Matrix::zeros(0, n) }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `max(C_i, 0)` per constraint.
    pub fn violations(&self) -> Vector {
        self.values.iter().map(|c| c.max(0.0)).collect()
    }
}

/// Linear extended class-κ function `α(c) = slope · c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaFn {
    slope: f64,
}

impl KappaFn {
    pub const DEFAULT_SLOPE: f64 = 20.0;

    pub fn new(slope: f64) -> Result<Self> {
        if !(slope > 0.0 && slope.is_finite()) {
            return Err(Error::InvalidArgument(format!("kappa slope must be positive, got {slope}")));
        }
        Ok(KappaFn { slope })
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn apply(&self, c: f64) -> f64 {
        self.slope * c
    }
}

impl Default for KappaFn {
    fn default() -> Self {
        KappaFn { slope: Self::DEFAULT_SLOPE }
    }
}

/// Builds `{θ̇ : ∇C θ̇ ≤ −α(C)}`.
///
/// Zero gradient rows are dropped when their bound is already satisfied by
/// every direction (`C_i ≤ 0`), and near-parallel rows are deduplicated,
/// keeping the one with the larger `C_i`. Anything still rank deficient is
/// reported as [`Error::RankDeficient`].
pub fn build_update_polytope(cons: &ConstraintEval, kappa: KappaFn) -> Result<Polytope> {
    let n = cons.gradients.cols();
    let norms: Vec<f64> = (0..cons.len()).map(|i| dot(cons.gradients.row(i), cons.gradients.row(i)).sqrt()).collect();

    let mut keep: Vec<usize> = Vec::with_capacity(cons.len());
    for i in 0..cons.len() {
        let value = cons.values[i];
        if norms[i] == 0.0 {
            if value <= 0.0 {
                continue;
            }
            return Err(Error::RankDeficient(format!("constraint {i} is violated ({value}) but has a zero gradient")));
        }
        let duplicate = keep
            .iter()
            .position(|&j| dot(cons.gradients.row(i), cons.gradients.row(j)) / (norms[i] * norms[j]) > DUPLICATE_COSINE);
        match duplicate {
            Some(slot) => {
                if value > cons.values[keep[slot]] {
                    keep[slot] = i;
                }
            }
            None => keep.push(i),
        }
    }
    keep.sort_unstable();

    let a = if keep.len() == cons.len() { cons.gradients.clone() } else { cons.gradients.select_rows(&keep) };
    let b: Vector = keep.iter().map(|&i| -kappa.apply(cons.values[i])).collect();
    debug_assert_eq!(a.cols(), n);
    gram_factor(&a)?;
    Polytope::new(a, b)
}

/// Projects `raw_dir` onto the update polytope and takes a step of size
/// `beta`. Returns `(θ_next, θ̇)`.
pub fn safe_update(
    theta: &[f64],
    raw_dir: &[f64],
    poly: &Polytope,
    metric: &ProjectionMetric,
    beta: f64,
) -> Result<(Vector, Vector)> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    if theta.len() != raw_dir.len() {
        return Err(Error::DimensionMismatch(format!("theta has {} entries, direction {}", theta.len(), raw_dir.len())));
    }
    if metric.constraint_matrix() != poly.a() {
        return Err(Error::InvalidArgument("metric was built for a different constraint matrix".into()));
    }
    let dir = metric.project(raw_dir, poly.b())?.x;
    let mut next = Vector::from(theta);
    next.axpy(beta, &dir);
    Ok((next, dir))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single(c: f64, grad: &[f64]) -> ConstraintEval {
        ConstraintEval::new(Vector::from(vec![c]), Matrix::from_rows(&[grad])).unwrap()
    }

    #[test]
    fn polytope_from_constraint() {
        let p = build_update_polytope(&single(0.5, &[1.0, 0.0]), KappaFn::default()).unwrap();
        assert_eq!(p.a(), &Matrix::from_rows(&[[1.0, 0.0]]));
        assert_eq!(p.b().as_slice(), &[-10.0]);
    }

    #[test]
    fn boundary_and_interior_bounds() {
        let k = KappaFn::new(3.0).unwrap();
        let p = build_update_polytope(&single(0.0, &[1.0, 1.0]), k).unwrap();
        assert_eq!(p.b()[0], 0.0);
        let p = build_update_polytope(&single(-1.0, &[0.0, 2.0]), KappaFn::new(2.0).unwrap()).unwrap();
        assert_eq!(p.b().as_slice(), &[2.0]);
    }

    #[test]
    fn slope_must_be_positive() {
        assert!(KappaFn::new(0.0).is_err());
        assert!(KappaFn::new(-2.0).is_err());
        assert_eq!(KappaFn::new(2.0).unwrap().apply(0.0), 0.0);
    }

    #[test]
    fn duplicate_rows_keep_larger_violation() {
        let cons = ConstraintEval::new(
            Vector::from(vec![0.2, 0.7, -1.0]),
            Matrix::from_rows(&[[1.0, 1.0, 0.0], [2.0, 2.0, 0.0], [0.0, 0.0, 1.0]]),
        )
        .unwrap();
        let p = build_update_polytope(&cons, KappaFn::new(1.0).unwrap()).unwrap();
        assert_eq!(p.a(), &Matrix::from_rows(&[[2.0, 2.0, 0.0], [0.0, 0.0, 1.0]]));
        assert_eq!(p.b().as_slice(), &[-0.7, 1.0]);
    }

    #[test]
    fn satisfied_zero_gradient_rows_are_dropped() {
        let cons = ConstraintEval::new(Vector::from(vec![-2.0, 1.0]), Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]])).unwrap();
        let p = build_update_polytope(&cons, KappaFn::default()).unwrap();
        assert_eq!(p.m(), 1);
        let bad = single(1.0, &[0.0, 0.0]);
        assert!(matches!(build_update_polytope(&bad, KappaFn::default()), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn dependent_rows_are_rank_deficient() {
        let cons = ConstraintEval::new(
            Vector::from(vec![1.0, 1.0, 1.0]),
            Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 1.0]]),
        )
        .unwrap();
        assert!(build_update_polytope(&cons, KappaFn::default()).is_ok());
        let cons =
            ConstraintEval::new(Vector::from(vec![1.0, 1.0, 1.0]), Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
                .unwrap();
        assert!(matches!(build_update_polytope(&cons, KappaFn::default()), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn interior_direction_unchanged() {
        let p = build_update_polytope(&single(-1.0, &[1.0, 0.0]), KappaFn::default()).unwrap();
        let metric = ProjectionMetric::build(p.a(), 1.0).unwrap();
        let (next, dir) = safe_update(&[1.0, 1.0], &[0.5, -0.5], &p, &metric, 0.1).unwrap();
        assert_eq!(dir.as_slice(), &[0.5, -0.5]);
        assert_eq!(next.as_slice(), &[1.05, 0.95]);
    }

    #[test]
    fn zero_direction_pushed_inward() {
        let p = build_update_polytope(&single(0.5, &[1.0, 0.0]), KappaFn::default()).unwrap();
        let metric = ProjectionMetric::build(p.a(), 1.0).unwrap();
        let (next, dir) = safe_update(&[0.0, 0.0], &[0.0, 0.0], &p, &metric, 0.001).unwrap();
        assert_abs_diff_eq!(dir.as_slice(), [-10.0, 0.0].as_slice(), epsilon = 1e-12);
        assert_abs_diff_eq!(next.as_slice(), [-0.01, 0.0].as_slice(), epsilon = 1e-15);
    }

    #[test]
    fn mismatched_metric_rejected() {
        let p = build_update_polytope(&single(0.5, &[1.0, 0.0]), KappaFn::default()).unwrap();
        let other = ProjectionMetric::build(&Matrix::from_rows(&[[0.0, 1.0]]), 1.0).unwrap();
        assert!(safe_update(&[0.0, 0.0], &[0.0, 0.0], &p, &other, 0.1).is_err());
        let metric = ProjectionMetric::build(p.a(), 1.0).unwrap();
        assert!(safe_update(&[0.0, 0.0], &[0.0, 0.0], &p, &metric, 0.0).is_err());
    }
}
