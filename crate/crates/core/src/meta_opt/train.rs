//! Meta-training loop and a synthetic task family.

use super::cell::RecurrentOptimizer;
use super::unroll::{BatchUnroll, Evaluation, InnerProblem, MetaRule, UnrollConfig};
use crate::baselines::{AdaptiveState, Rule};
use crate::constraint_dynamics::{ConstraintEval, KappaFn};
use crate::error::{Error, Result};
use crate::ndcore::{Matrix, SeededRng, Vector};

/// Source of freshly initialized inner problems.
pub trait TaskSampler {
    type Problem: InnerProblem;

    fn sample(&mut self, rng: &mut SeededRng) -> Self::Problem;
}

/// Consecutive non-finite outer steps tolerated before giving up.
pub const MAX_CONSECUTIVE_FAILURES: usize = 3;

/// Diagnostics of one outer step.
#[derive(Clone, Debug, PartialEq)]
pub struct OuterStepLog {
    pub step: usize,
    /// Batch-mean meta-loss summed over segments; NaN for a skipped step.
    pub loss: f64,
    /// Batch-mean final-iterate violation.
    pub final_violation: f64,
    pub initial_violation: f64,
    /// Batch-mean final objective.
    pub final_objective: f64,
    /// Largest polytope residual of any inner update.
    pub max_polytope_residual: f64,
    pub skipped: bool,
}

/// Optimizer for φ with its moment estimates.
#[derive(Clone, Debug)]
pub struct MetaTrainer {
    pub opt: RecurrentOptimizer,
    update: AdaptiveState,
    lr: f64,
}

impl MetaTrainer {
    pub fn new(opt: RecurrentOptimizer, cfg: &UnrollConfig) -> Self {
        let rule = match cfg.meta_rule {
            MetaRule::Adam => Rule::Adam,
            MetaRule::Sgd => Rule::Sgd,
        };
        let update = AdaptiveState::new(rule, opt.param_count());
        MetaTrainer { opt, update, lr: cfg.meta_lr }
    }

    /// Applies one descent step on φ.
    pub fn apply(&mut self, phi_grad: &[f64]) -> Result<()> {
        let mut params = self.opt.params();
        self.update.step(&mut params, phi_grad, self.lr)?;
        self.opt.set_params(&params)
    }

    /// One outer step: `cfg.batch` fresh problems unrolled for `cfg.span`
    /// iterates, with φ updated after every truncation segment. On failure
    /// φ and the moment estimates are restored.
    pub fn outer_step<S: TaskSampler>(
        &mut self,
        sampler: &mut S,
        cfg: &UnrollConfig,
        kappa: KappaFn,
        rng: &mut SeededRng,
        step: usize,
    ) -> Result<OuterStepLog> {
        let problems: Vec<S::Problem> = (0..cfg.batch).map(|_| sampler.sample(rng)).collect();
        let saved = (self.opt.clone(), self.update.clone());
        match self.outer_step_inner(problems, cfg, kappa, step) {
            Ok(log) => Ok(log),
            Err(e) => {
                self.opt = saved.0;
                self.update = saved.1;
                Err(e)
            }
        }
    }

    fn outer_step_inner<P: InnerProblem>(
        &mut self,
        problems: Vec<P>,
        cfg: &UnrollConfig,
        kappa: KappaFn,
        step: usize,
    ) -> Result<OuterStepLog> {
        let b = problems.len() as f64;
        let mut run = BatchUnroll::start(&self.opt, cfg, kappa, problems)?;
        let mut loss = 0.0;
        while run.k < cfg.span {
            let steps = cfg.truncation.min(cfg.span - run.k);
            let (l, g) = run.segment(steps, true)?;
            let g = g.expect("gradient requested").scaled(1.0 / b);
            if !g.is_finite() {
                return Err(Error::NonFiniteLoss { step: run.k });
            }
            loss += l / b;
            self.apply(&g)?;
            // Later segments continue with the updated φ.
            run.set_optimizer(&self.opt);
        }
        let traces = &run.traces;
        let mean = |f: &dyn Fn(&super::unroll::UnrollTrace) -> f64| traces.iter().map(f).sum::<f64>() / b;
        Ok(OuterStepLog {
            step,
            loss,
            final_violation: mean(&|t| *t.violation.last().unwrap()),
            initial_violation: mean(&|t| t.violation[0]),
            final_objective: mean(&|t| *t.objective.last().unwrap()),
            max_polytope_residual: traces.iter().map(|t| t.max_polytope_residual).fold(f64::NEG_INFINITY, f64::max),
            skipped: false,
        })
    }
}

/// Trains φ for `outer_steps` outer steps. Non-finite outer steps are
/// skipped and logged; [`MAX_CONSECUTIVE_FAILURES`] in a row abort.
pub fn train_meta<S: TaskSampler>(
    opt: RecurrentOptimizer,
    sampler: &mut S,
    cfg: &UnrollConfig,
    kappa: KappaFn,
    outer_steps: usize,
    rng: &mut SeededRng,
) -> Result<(RecurrentOptimizer, Vec<OuterStepLog>)> {
    cfg.validate()?;
    if outer_steps == 0 {
        return Err(Error::InvalidArgument("outer_steps must be at least 1".into()));
    }
    let mut trainer = MetaTrainer::new(opt, cfg);
    let mut logs = Vec::with_capacity(outer_steps);
    let mut failures = 0;
    for step in 0..outer_steps {
        match trainer.outer_step(sampler, cfg, kappa, rng, step) {
            Ok(log) => {
                failures = 0;
                logs.push(log);
            }
            Err(Error::NonFiniteLoss { step: inner }) => {
                failures += 1;
                if failures >= MAX_CONSECUTIVE_FAILURES {
                    return Err(Error::NonFiniteLoss { step: inner });
                }
                logs.push(OuterStepLog {
                    step,
                    loss: f64::NAN,
                    final_violation: f64::NAN,
                    initial_violation: f64::NAN,
                    final_objective: f64::NAN,
                    max_polytope_residual: f64::NAN,
                    skipped: true,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok((trainer.opt, logs))
}

/// Concave quadratic objective with one linear and one ball constraint:
/// `J(θ) = −½ Σ h_i (θ_i − c_i)²`, `C_1 = aᵀθ − e`, `C_2 = ‖θ − z‖² − ρ²`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstrainedQuadratic {
    pub curvature: Vector,
    pub center: Vector,
    pub normal: Vector,
    pub offset: f64,
    pub ball_center: Vector,
    pub ball_radius: f64,
    pub theta0: Vector,
}

impl InnerProblem for ConstrainedQuadratic {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn initial_theta(&self) -> Vector {
        self.theta0.clone()
    }

    fn evaluate(&mut self, theta: &[f64]) -> Result<Evaluation> {
        let n = self.dim();
        let mut objective = 0.0;
        let mut gradient = Vector::zeros(n);
        for i in 0..n {
            let d = theta[i] - self.center[i];
            objective -= 0.5 * self.curvature[i] * d * d;
            gradient[i] = -self.curvature[i] * d;
        }
        let linear = self.normal.dot(theta) - self.offset;
        let shifted: Vec<f64> = theta.iter().zip(self.ball_center.iter()).map(|(t, z)| t - z).collect();
        let ball = shifted.iter().map(|s| s * s).sum::<f64>() - self.ball_radius * self.ball_radius;
        let ball_grad: Vec<f64> = shifted.iter().map(|s| 2.0 * s).collect();
        let constraints = ConstraintEval::new(
            Vector::from(vec![linear, ball]),
            Matrix::from_rows(&[self.normal.as_slice(), ball_grad.as_slice()]),
        )?;
        Ok(Evaluation { objective, gradient, constraints })
    }
}

/// Random [`ConstrainedQuadratic`]s whose initial point violates at least
/// one constraint.
#[derive(Clone, Debug)]
pub struct QuadraticTaskSampler {
    pub dim: usize,
}

impl QuadraticTaskSampler {
    pub fn new(dim: usize) -> Self {
        QuadraticTaskSampler { dim }
    }
}

impl TaskSampler for QuadraticTaskSampler {
    type Problem = ConstrainedQuadratic;

    fn sample(&mut self, rng: &mut SeededRng) -> ConstrainedQuadratic {
        let n = self.dim;
        loop {
            let curvature: Vector = (0..n).map(|_| rng.uniform_range(0.5, 2.0)).collect();
            let center = rng.normal_vec(n, 1.0);
            let normal = rng.unit_vector(n);
            let offset = rng.uniform_range(-0.5, 0.5);
            let ball_center = rng.normal_vec(n, 0.5);
            let ball_radius = rng.uniform_range(1.0, 2.0);
            let theta0 = rng.normal_vec(n, 1.5);
            let mut task = ConstrainedQuadratic { curvature, center, normal, offset, ball_center, ball_radius, theta0 };
            let ev = task.evaluate(&task.theta0.clone()).expect("finite task");
            if ev.constraints.values.iter().any(|&c| c > 0.0) {
                return task;
            }
        }
    }
}
