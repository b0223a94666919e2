//! Policy optimization on the navigation CMDP with the learned optimizer
//! and with the one-step projected gradient.

use fisar_core::baselines::projected_pg_step;
use fisar_core::cmdp_env::{rollout_with, NavConfig, Trajectory};
use fisar_core::constraint_dynamics::{build_update_polytope, ConstraintEval, KappaFn};
use fisar_core::meta_opt::{run_optimizer, Evaluation, InnerProblem, RecurrentOptimizer, TaskSampler};
use fisar_core::ndcore::{SeededRng, Vector};
use fisar_core::policy::{estimate_grads, GaussianMlpPolicy, GradEstimate};
use fisar_core::projection::ProjectionMetric;

use crate::config::PolicyConfig;
use crate::metrics::MetricTable;

/// Stream ids derived from a run seed.
pub const STREAM_POLICY_INIT: u64 = 1;
pub const STREAM_FISAR_ROLLOUTS: u64 = 2;
pub const STREAM_BASELINE_ROLLOUTS: u64 = 3;

/// Estimates at one policy iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub objective: f64,
    /// `C_i − C̄_i` per channel.
    pub constraints: Vec<f64>,
}

/// Policy optimization as an inner problem: every evaluation samples a
/// fresh batch and returns score-function estimates.
#[derive(Clone, Debug)]
pub struct NavTask {
    pub env: NavConfig,
    pub policy: GaussianMlpPolicy,
    pub settings: PolicyConfig,
    rng: SeededRng,
    pub records: Vec<IterationRecord>,
}

impl NavTask {
    pub fn new(env: NavConfig, policy: GaussianMlpPolicy, settings: PolicyConfig, rng: SeededRng) -> Self {
        NavTask { env, policy, settings, rng, records: Vec::new() }
    }

    fn estimate(&mut self, theta: &[f64]) -> fisar_core::Result<GradEstimate> {
        self.policy.set_params(theta)?;
        let batch: Vec<Trajectory> =
            (0..self.settings.trajectories).map(|_| rollout_with(&self.env, &self.policy, &mut self.rng)).collect();
        let e = estimate_grads(&self.policy, &batch, self.env.gamma, &self.env.caps, self.settings.estimator)?;
        self.records.push(IterationRecord { objective: e.objective, constraints: e.constraints.as_slice().to_vec() });
        Ok(e)
    }
}

/// Constraint rows with an all-zero estimated gradient carry no descent
/// information for this batch (every trajectory scored the same) and are
/// left out of the update polytope.
pub fn informative_constraints(e: &GradEstimate) -> fisar_core::Result<ConstraintEval> {
    let keep: Vec<usize> = (0..e.constraints.len()).filter(|&i| e.constraint_grads.row(i).iter().any(|g| *g != 0.0)).collect();
    let values: Vector = keep.iter().map(|&i| e.constraints[i]).collect();
    ConstraintEval::new(values, e.constraint_grads.select_rows(&keep))
}

impl InnerProblem for NavTask {
    fn dim(&self) -> usize {
        self.policy.param_count()
    }

    fn initial_theta(&self) -> Vector {
        self.policy.params()
    }

    fn evaluate(&mut self, theta: &[f64]) -> fisar_core::Result<Evaluation> {
        let e = self.estimate(theta)?;
        let constraints = informative_constraints(&e)?;
        Ok(Evaluation { objective: e.objective, gradient: e.objective_grad, constraints })
    }
}

/// Fresh navigation tasks for meta-training: a newly initialized policy and
/// an independent rollout stream per task.
#[derive(Clone, Debug)]
pub struct NavTaskSampler {
    pub env: NavConfig,
    pub settings: PolicyConfig,
}

impl TaskSampler for NavTaskSampler {
    type Problem = NavTask;

    fn sample(&mut self, rng: &mut SeededRng) -> NavTask {
        let policy = GaussianMlpPolicy::new(self.settings.hidden, &mut rng.fork(STREAM_POLICY_INIT)).expect("validated width");
        NavTask::new(self.env.clone(), policy, self.settings.clone(), rng.fork(STREAM_FISAR_ROLLOUTS))
    }
}

/// `return, constraint_i.., violation_i..` for `channels` cost channels.
pub fn nav_columns(channels: usize) -> Vec<String> {
    let mut cols = vec!["return".to_owned()];
    cols.extend((0..channels).map(|i| format!("constraint_{i}")));
    cols.extend((0..channels).map(|i| format!("violation_{i}")));
    cols
}

pub fn records_table(records: &[IterationRecord], channels: usize) -> MetricTable {
    let mut t = MetricTable::new(nav_columns(channels));
    for (k, r) in records.iter().enumerate() {
        let mut row = vec![r.objective];
        row.extend(&r.constraints);
        row.extend(r.constraints.iter().map(|c| c.max(0.0)));
        t.push(k, row);
    }
    t
}

/// Step and projection settings shared by both update rules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateSettings {
    pub beta: f64,
    pub delta: f64,
    pub kappa: KappaFn,
}

/// `iterations` learned-optimizer updates from `init`; records the
/// estimates at all `iterations + 1` iterates.
pub fn run_fisar(
    opt: &RecurrentOptimizer,
    env: &NavConfig,
    settings: &PolicyConfig,
    init: &GaussianMlpPolicy,
    iterations: usize,
    update: UpdateSettings,
    rng: SeededRng,
) -> fisar_core::Result<Vec<IterationRecord>> {
    let mut task = NavTask::new(env.clone(), init.clone(), settings.clone(), rng);
    run_optimizer(opt, &mut task, iterations, update.beta, update.delta, update.kappa)?;
    Ok(task.records)
}

/// `iterations` one-step projected policy-gradient updates with step size
/// `lr` from `init`.
pub fn run_projected_pg(
    env: &NavConfig,
    settings: &PolicyConfig,
    init: &GaussianMlpPolicy,
    iterations: usize,
    lr: f64,
    update: UpdateSettings,
    rng: SeededRng,
) -> fisar_core::Result<Vec<IterationRecord>> {
    let mut task = NavTask::new(env.clone(), init.clone(), settings.clone(), rng);
    let mut theta = init.params();
    for k in 0..=iterations {
        let e = task.estimate(&theta)?;
        if k == iterations {
            break;
        }
        let cons = informative_constraints(&e)?;
        let poly = build_update_polytope(&cons, update.kappa)?;
        let metric = ProjectionMetric::build(poly.a(), update.delta)?;
        theta = projected_pg_step(&theta, &e.objective_grad, &poly, &metric, lr)?;
        if !theta.is_finite() {
            return Err(fisar_core::Error::NonFiniteLoss { step: k });
        }
    }
    Ok(task.records)
}
