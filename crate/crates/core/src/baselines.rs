//! Hand-designed reference optimizers.
//!
//! All rules take a descent step `θ' = θ − lr · u(g)`; callers maximizing an
//! objective pass the negated gradient. Bias corrections use running powers
//! of the decay coefficients rather than `powi`, so traces are reproducible
//! bit-for-bit by any implementation that multiplies in the same order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::Vector;
use crate::projection::{Polytope, ProjectionMetric};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const RMS_DECAY: f64 = 0.99;
pub const RMS_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    /// `θ − lr·g`
    Sgd,
    /// Adaptive moment estimation with bias correction.
    Adam,
    /// Root-mean-square scaling without momentum.
    RmsProp,
}

impl Rule {
    pub fn name(&self) -> &'static str {
        match self {
            Rule::Sgd => "sgd",
            Rule::Adam => "adam",
            Rule::RmsProp => "rmsprop",
        }
    }
}

/// Moment estimates for one of the [`Rule`]s.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveState {
    rule: Rule,
    first: Vector,
    second: Vector,
    steps: u64,
    beta1_pow: f64,
    beta2_pow: f64,
}

impl AdaptiveState {
    pub fn new(rule: Rule, n: usize) -> Self {
        AdaptiveState { rule, first: Vector::zeros(n), second: Vector::zeros(n), steps: 0, beta1_pow: 1.0, beta2_pow: 1.0 }
    }

    pub fn rule(&self) -> Rule {
        self.rule
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moment(&self) -> &Vector {
        &self.first
    }

    pub fn second_moment(&self) -> &Vector {
        &self.second
    }

    /// Applies one descent step to `theta` in place.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        if theta.len() != grad.len() || theta.len() != self.first.len() {
            return Err(Error::DimensionMismatch(format!(
                "state for {} parameters, got theta {} and grad {}",
                self.first.len(),
                theta.len(),
                grad.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteInput("gradient".into()));
        }
        self.steps += 1;
        match self.rule {
            Rule::Sgd => {
                for (t, g) in theta.iter_mut().zip(grad) {
                    *t -= lr * g;
                }
            }
            Rule::Adam => {
                self.beta1_pow *= ADAM_BETA1;
                self.beta2_pow *= ADAM_BETA2;
                let c1 = 1.0 - self.beta1_pow;
                let c2 = 1.0 - self.beta2_pow;
                for i in 0..theta.len() {
                    let g = grad[i];
                    self.first[i] = ADAM_BETA1 * self.first[i] + (1.0 - ADAM_BETA1) * g;
                    self.second[i] = ADAM_BETA2 * self.second[i] + (1.0 - ADAM_BETA2) * (g * g);
                    let m_hat = self.first[i] / c1;
                    let v_hat = self.second[i] / c2;
                    theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
            Rule::RmsProp => {
                for i in 0..theta.len() {
                    let g = grad[i];
                    self.second[i] = RMS_DECAY * self.second[i] + (1.0 - RMS_DECAY) * (g * g);
                    theta[i] -= lr * g / (self.second[i].sqrt() + RMS_EPS);
                }
            }
        }
        Ok(())
    }
}

/// Functional form of [`AdaptiveState::step`].
pub fn baseline_step(state: &AdaptiveState, theta: &[f64], grad: &[f64], lr: f64) -> Result<(Vector, AdaptiveState)> {
    let mut next_state = state.clone();
    let mut next = Vector::from(theta);
    next_state.step(&mut next, grad, lr)?;
    Ok((next, next_state))
}

/// One-step projected gradient: `θ + β · proj(∇J)` onto the update polytope.
pub fn projected_pg_step(theta: &[f64], grad: &[f64], poly: &Polytope, metric: &ProjectionMetric, beta: f64) -> Result<Vector> {
    crate::constraint_dynamics::safe_update(theta, grad, poly, metric, beta).map(|(next, _)| next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::Matrix;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sgd_descends() {
        let (next, st) = baseline_step(&AdaptiveState::new(Rule::Sgd, 1), &[1.0], &[2.0], 0.1).unwrap();
        assert_abs_diff_eq!(next[0], 0.8, epsilon = 1e-15);
        assert_eq!(st.steps(), 1);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let (next, _) = baseline_step(&AdaptiveState::new(Rule::Adam, 1), &[0.0], &[1.0], 0.001).unwrap();
        assert_abs_diff_eq!(next[0], -0.001 / (1.0 + 1e-8), epsilon = 1e-18);
        assert_abs_diff_eq!(-next[0], 9.9999999e-4, epsilon = 1e-18);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for rule in [Rule::Sgd, Rule::Adam, Rule::RmsProp] {
            let (next, _) = baseline_step(&AdaptiveState::new(rule, 2), &[0.3, -0.7], &[0.0, 0.0], 0.5).unwrap();
            assert_eq!(next.as_slice(), &[0.3, -0.7], "{rule:?}");
        }
    }

    #[test]
    fn invalid_inputs() {
        let st = AdaptiveState::new(Rule::Adam, 1);
        assert!(matches!(baseline_step(&st, &[0.0], &[f64::NAN], 0.1), Err(Error::NonFiniteInput(_))));
        assert!(baseline_step(&st, &[0.0], &[1.0], 0.0).is_err());
        assert!(matches!(baseline_step(&st, &[0.0, 1.0], &[1.0, 1.0], 0.1), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn projected_step_matches_hand_computation() {
        let poly = Polytope::new(Matrix::from_rows(&[[1.0, 0.0]]), Vector::from(vec![-10.0])).unwrap();
        let metric = ProjectionMetric::build(poly.a(), 1.0).unwrap();
        let next = projected_pg_step(&[0.0, 0.0], &[0.0, 0.0], &poly, &metric, 0.001).unwrap();
        assert_abs_diff_eq!(next.as_slice(), [-0.01, 0.0].as_slice(), epsilon = 1e-15);
    }

    #[test]
    fn slack_projection_is_plain_ascent() {
        let poly = Polytope::new(Matrix::from_rows(&[[1.0, 0.0]]), Vector::from(vec![100.0])).unwrap();
        let metric = ProjectionMetric::build(poly.a(), 1.0).unwrap();
        let next = projected_pg_step(&[1.0, 2.0], &[3.0, -4.0], &poly, &metric, 0.5).unwrap();
        assert_eq!(next.as_slice(), &[2.5, 0.0]);
    }
}
