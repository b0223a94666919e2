//! Quadratically constrained quadratic program benchmark.
//!
//! `min ‖Wx − y‖²` subject to `(x − x₀)ᵀM(x − x₀) − r ≤ 0`, where `M` may be
//! indefinite so the feasible set need not be convex. The learned optimizer
//! maximizes `−‖Wx − y‖²` through the safe update; the unconstrained
//! baselines minimize `‖Wx − y‖²` directly and ignore the constraint.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::baselines::{projected_pg_step, AdaptiveState, Rule};
use crate::constraint_dynamics::{build_update_polytope, ConstraintEval, KappaFn};
use crate::error::{Error, Result};
use crate::meta_opt::{run_optimizer, Evaluation, InnerProblem, RecurrentOptimizer, TaskSampler};
use crate::ndcore::{dot, Matrix, SeededRng, Vector};
use crate::projection::{ProjectionMetric, DEFAULT_DELTA};

/// Largest tolerated asymmetry of `W` and `M`.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcqpInstance {
    pub w: Matrix,
    pub y: Vector,
    pub m: Matrix,
    pub x0: Vector,
    pub r: f64,
}

/// `J`, `∇J`, `C` and `∇C` at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct QcqpEval {
    pub objective: f64,
    pub objective_grad: Vector,
    pub constraint: f64,
    pub constraint_grad: Vector,
}

impl QcqpInstance {
    pub fn new(w: Matrix, y: Vector, m: Matrix, x0: Vector, r: f64) -> Result<Self> {
        let n = y.len();
        if w.shape() != (n, n) || m.shape() != (n, n) || x0.len() != n {
            return Err(Error::DimensionMismatch(format!("W {:?}, M {:?}, y {}, x0 {}", w.shape(), m.shape(), n, x0.len())));
        }
        if !(w.is_finite() && m.is_finite() && y.is_finite() && x0.is_finite()) {
            return Err(Error::NonFiniteInput("QCQP instance".into()));
        }
        if !w.is_symmetric(SYMMETRY_TOLERANCE) || !m.is_symmetric(SYMMETRY_TOLERANCE) {
            return Err(Error::InvalidArgument("W and M must be symmetric".into()));
        }
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::InvalidArgument(format!("r must be positive, got {r}")));
        }
        Ok(QcqpInstance { w, y, m, x0, r })
    }

    pub fn dim(&self) -> usize {
        self.y.len()
    }
}

/// `J = ‖Wx − y‖²`, `∇J = 2Wᵀ(Wx − y)`, `C = (x − x₀)ᵀM(x − x₀) − r`,
/// `∇C = 2M(x − x₀)`.
pub fn qcqp_eval(inst: &QcqpInstance, x: &[f64]) -> Result<QcqpEval> {
    if x.len() != inst.dim() {
        return Err(Error::DimensionMismatch(format!("instance has dimension {}, got {}", inst.dim(), x.len())));
    }
    let residual = inst.w.matvec(x).sub(&inst.y);
    let objective = dot(&residual, &residual);
    let objective_grad = inst.w.tr_matvec(&residual).scaled(2.0);
    let shift = Vector::from(x).sub(&inst.x0);
    let m_shift = inst.m.matvec(&shift);
    let constraint = dot(&shift, &m_shift) - inst.r;
    let constraint_grad = m_shift.scaled(2.0);
    Ok(QcqpEval { objective, objective_grad, constraint, constraint_grad })
}

/// An instance together with the point the solvers start from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcqpTask {
    pub instance: QcqpInstance,
    pub start: Vector,
}

impl QcqpTask {
    pub fn eval_start(&self) -> QcqpEval {
        qcqp_eval(&self.instance, &self.start).expect("start matches the instance dimension")
    }
}

impl InnerProblem for QcqpTask {
    fn dim(&self) -> usize {
        self.instance.dim()
    }

    fn initial_theta(&self) -> Vector {
        self.start.clone()
    }

    fn evaluate(&mut self, theta: &[f64]) -> Result<Evaluation> {
        let e = qcqp_eval(&self.instance, theta)?;
        let constraints =
            ConstraintEval::new(Vector::from(vec![e.constraint]), Matrix::from_rows(&[e.constraint_grad.as_slice()]))?;
        Ok(Evaluation { objective: -e.objective, gradient: e.objective_grad.scaled(-1.0), constraints })
    }
}

/// Random instances: `W` and `M` are `QΛQᵀ` with Haar-random `Q` and
/// eigenvalues uniform on the given ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstanceGenerator {
    pub dim: usize,
    pub w_eigenvalues: (f64, f64),
    pub m_eigenvalues: (f64, f64),
    pub radius: f64,
    /// Distance from `x₀` at which the start point is drawn.
    pub start_distance: f64,
}

impl Default for InstanceGenerator {
    fn default() -> Self {
        InstanceGenerator { dim: 8, w_eigenvalues: (0.5, 2.0), m_eigenvalues: (-1.0, 2.0), radius: 1.0, start_distance: 3.0 }
    }
}

/// Start directions tried per instance before a new instance is drawn.
const START_ATTEMPTS: usize = 64;

impl InstanceGenerator {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::InvalidArgument(format!("{key}: {msg}")));
        if self.dim == 0 {
            return bad("dim", "must be at least 1".into());
        }
        let (lo, hi) = self.w_eigenvalues;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("w_eigenvalues", format!("need 0 < lo <= hi, got ({lo}, {hi})"));
        }
        let (lo, hi) = self.m_eigenvalues;
        if !(lo <= hi && lo.is_finite() && hi > 0.0 && hi.is_finite()) {
            return bad("m_eigenvalues", format!("need lo <= hi and hi > 0, got ({lo}, {hi})"));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad("radius", format!("must be positive, got {}", self.radius));
        }
        if !(self.start_distance > 0.0 && self.start_distance.is_finite()) {
            return bad("start_distance", format!("must be positive, got {}", self.start_distance));
        }
        Ok(())
    }

    /// `y` and `x₀` are standard normal.
    pub fn instance(&self, rng: &mut SeededRng) -> QcqpInstance {
        let w = random_symmetric(self.dim, self.w_eigenvalues, rng);
        let m = random_symmetric(self.dim, self.m_eigenvalues, rng);
        let y = rng.normal_vec(self.dim, 1.0);
        let x0 = rng.normal_vec(self.dim, 1.0);
        QcqpInstance::new(w, y, m, x0, self.radius).expect("generated instance is valid")
    }

    /// A random instance with a start point at `start_distance` from `x₀`
    /// that violates the constraint.
    pub fn infeasible_task(&self, rng: &mut SeededRng) -> QcqpTask {
        loop {
            let instance = self.instance(rng);
            if let Some(start) = self.infeasible_start(&instance, rng) {
                return QcqpTask { instance, start };
            }
        }
    }

    /// An infeasible-start task whose unconstrained minimizer
    /// `x₀ + u/2` (`‖u‖ = 1`) is strictly feasible when `M ≼ 2I`.
    pub fn feasible_optimum_task(&self, rng: &mut SeededRng) -> QcqpTask {
        loop {
            let mut instance = self.instance(rng);
            let mut optimum = rng.unit_vector(self.dim).scaled(0.5);
            optimum.axpy(1.0, &instance.x0);
            instance.y = instance.w.matvec(&optimum);
            if qcqp_eval(&instance, &optimum).expect("dimension").constraint >= 0.0 {
                continue;
            }
            if let Some(start) = self.infeasible_start(&instance, rng) {
                return QcqpTask { instance, start };
            }
        }
    }

    fn infeasible_start(&self, instance: &QcqpInstance, rng: &mut SeededRng) -> Option<Vector> {
        (0..START_ATTEMPTS).find_map(|_| {
            let mut start = rng.unit_vector(self.dim).scaled(self.start_distance);
            start.axpy(1.0, &instance.x0);
            (qcqp_eval(instance, &start).expect("dimension").constraint > 0.0).then_some(start)
        })
    }
}

/// Infeasible-start tasks for meta-training on the QCQP family.
#[derive(Clone, Debug, Default)]
pub struct QcqpTaskSampler {
    pub generator: InstanceGenerator,
}

impl TaskSampler for QcqpTaskSampler {
    type Problem = QcqpTask;

    fn sample(&mut self, rng: &mut SeededRng) -> QcqpTask {
        self.generator.infeasible_task(rng)
    }
}

/// Orthogonal matrix from modified Gram–Schmidt on Gaussian columns.
fn random_orthogonal(n: usize, rng: &mut SeededRng) -> Matrix {
    loop {
        let mut cols: Vec<Vector> = (0..n).map(|_| rng.normal_vec(n, 1.0)).collect();
        let mut ok = true;
        for j in 0..n {
            for i in 0..j {
                let proj = cols[i].dot(&cols[j]);
                let qi = cols[i].clone();
                cols[j].axpy(-proj, &qi);
            }
            let norm = cols[j].norm();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols[j] = cols[j].scaled(1.0 / norm);
        }
        if ok {
            let mut q = Matrix::zeros(n, n);
            for (j, c) in cols.iter().enumerate() {
                for i in 0..n {
                    q[(i, j)] = c[i];
                }
            }
            return q;
        }
    }
}

/// `QΛQᵀ` with eigenvalues uniform on `range`, symmetrized exactly.
fn random_symmetric(n: usize, range: (f64, f64), rng: &mut SeededRng) -> Matrix {
    let q = random_orthogonal(n, rng);
    let eig: Vec<f64> = (0..n).map(|_| rng.uniform_range(range.0, range.1)).collect();
    let s = q.matmul(&Matrix::diag(&eig)).matmul_tr(&q);
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = 0.5 * (s[(i, j)] + s[(j, i)]);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QcqpSolver {
    /// Learned optimizer through the safe update.
    Fisar,
    Adam,
    RmsProp,
    Sgd,
    /// `x + β·proj(−∇J)` onto the single-constraint update polytope.
    ProjectedPg,
}

impl QcqpSolver {
    pub const ALL: [QcqpSolver; 5] =
        [QcqpSolver::Fisar, QcqpSolver::Adam, QcqpSolver::RmsProp, QcqpSolver::Sgd, QcqpSolver::ProjectedPg];

    pub fn name(&self) -> &'static str {
        match self {
            QcqpSolver::Fisar => "fisar",
            QcqpSolver::Adam => "adam",
            QcqpSolver::RmsProp => "rmsprop",
            QcqpSolver::Sgd => "sgd",
            QcqpSolver::ProjectedPg => "projected-pg",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub steps: usize,
    /// Step size of the safe update, used by `fisar` and `projected-pg`.
    pub beta: f64,
    pub delta: f64,
    pub kappa_slope: f64,
    pub adam_lr: f64,
    pub rmsprop_lr: f64,
    pub sgd_lr: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            steps: 1000,
            beta: 0.001,
            delta: DEFAULT_DELTA,
            kappa_slope: KappaFn::DEFAULT_SLOPE,
            adam_lr: 0.01,
            rmsprop_lr: 0.01,
            sgd_lr: 0.01,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("beta", self.beta),
            ("delta", self.delta),
            ("kappa_slope", self.kappa_slope),
            ("adam_lr", self.adam_lr),
            ("rmsprop_lr", self.rmsprop_lr),
            ("sgd_lr", self.sgd_lr),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{key}: must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn kappa(&self) -> Result<KappaFn> {
        KappaFn::new(self.kappa_slope)
    }
}

/// `J` and `max(C, 0)` at iterate `step`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub objective: f64,
    pub violation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverCurve {
    pub solver: QcqpSolver,
    /// Iterates `0..=steps`.
    pub points: Vec<CurvePoint>,
    pub final_x: Vector,
    /// Largest `∇C·ẋ + α(C)` over the run; only tracked by the learned
    /// optimizer, `None` for the other solvers.
    pub max_polytope_residual: Option<f64>,
}

impl SolverCurve {
    pub fn last(&self) -> CurvePoint {
        *self.points.last().expect("curves hold at least the initial point")
    }
}

fn point(step: usize, e: &QcqpEval) -> CurvePoint {
    CurvePoint { step, objective: e.objective, violation: e.constraint.max(0.0) }
}

fn diverged(e: &QcqpEval) -> bool {
    !(e.objective.is_finite() && e.constraint.is_finite())
}

/// Runs one solver from `task.start` for `cfg.steps` iterations.
/// `opt` is required for [`QcqpSolver::Fisar`] and ignored otherwise.
pub fn run_solver(
    task: &QcqpTask,
    solver: QcqpSolver,
    opt: Option<&RecurrentOptimizer>,
    cfg: &BenchmarkConfig,
) -> Result<SolverCurve> {
    cfg.validate()?;
    let inst = &task.instance;
    let kappa = cfg.kappa()?;
    match solver {
        QcqpSolver::Fisar => {
            let opt = opt.ok_or_else(|| Error::InvalidArgument("fisar solver needs a trained optimizer".into()))?;
            let (final_x, trace) = run_optimizer(opt, task.clone(), cfg.steps, cfg.beta, cfg.delta, kappa)?;
            let points = trace
                .objective
                .iter()
                .zip(&trace.violation)
                .enumerate()
                .map(|(step, (j, v))| CurvePoint { step, objective: -j, violation: *v })
                .collect();
            let residual = if cfg.steps == 0 { None } else { Some(trace.max_polytope_residual) };
            Ok(SolverCurve { solver, points, final_x, max_polytope_residual: residual })
        }
        QcqpSolver::ProjectedPg => {
            let mut x = task.start.clone();
            let mut e = qcqp_eval(inst, &x)?;
            let mut points = vec![point(0, &e)];
            for step in 1..=cfg.steps {
                let cons =
                    ConstraintEval::new(Vector::from(vec![e.constraint]), Matrix::from_rows(&[e.constraint_grad.as_slice()]))?;
                let poly = build_update_polytope(&cons, kappa)?;
                let metric = ProjectionMetric::build(poly.a(), cfg.delta)?;
                x = projected_pg_step(&x, &e.objective_grad.scaled(-1.0), &poly, &metric, cfg.beta)?;
                e = qcqp_eval(inst, &x)?;
                if diverged(&e) {
                    return Err(Error::NonFiniteLoss { step });
                }
                points.push(point(step, &e));
            }
            Ok(SolverCurve { solver, points, final_x: x, max_polytope_residual: None })
        }
        QcqpSolver::Adam | QcqpSolver::RmsProp | QcqpSolver::Sgd => {
            let (rule, lr) = match solver {
                QcqpSolver::Adam => (Rule::Adam, cfg.adam_lr),
                QcqpSolver::RmsProp => (Rule::RmsProp, cfg.rmsprop_lr),
                _ => (Rule::Sgd, cfg.sgd_lr),
            };
            let mut state = AdaptiveState::new(rule, inst.dim());
            let mut x = task.start.clone();
            let mut e = qcqp_eval(inst, &x)?;
            let mut points = vec![point(0, &e)];
            for step in 1..=cfg.steps {
                state.step(&mut x, &e.objective_grad, lr)?;
                e = qcqp_eval(inst, &x)?;
                if diverged(&e) {
                    return Err(Error::NonFiniteLoss { step });
                }
                points.push(point(step, &e));
            }
            Ok(SolverCurve { solver, points, final_x: x, max_polytope_residual: None })
        }
    }
}

/// Runs every solver in `solvers` on `task`. Deterministic: the same
/// inputs give bit-identical curves.
pub fn run_qcqp_benchmark(
    task: &QcqpTask,
    solvers: &[QcqpSolver],
    opt: Option<&RecurrentOptimizer>,
    cfg: &BenchmarkConfig,
) -> Result<Vec<SolverCurve>> {
    solvers.iter().map(|&s| run_solver(task, s, opt, cfg)).collect()
}

/// Writes `step,solver,objective,violation` rows with 17 significant
/// digits.
pub fn write_curves_csv<W: Write>(out: &mut W, curves: &[SolverCurve]) -> io::Result<()> {
    writeln!(out, "step,solver,objective,violation")?;
    for c in curves {
        for p in &c.points {
            writeln!(out, "{},{},{:.16e},{:.16e}", p.step, c.solver.name(), p.objective, p.violation)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_instance(n: usize) -> QcqpInstance {
        QcqpInstance::new(Matrix::identity(n), Vector::zeros(n), Matrix::identity(n), Vector::zeros(n), 1.0).unwrap()
    }

    #[test]
    fn center_is_strictly_feasible() {
        let mut rng = SeededRng::new(1);
        let inst = InstanceGenerator::default().instance(&mut rng);
        let e = qcqp_eval(&inst, &inst.x0.clone()).unwrap();
        assert_eq!(e.constraint, -inst.r);
        assert!(e.constraint_grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn identity_objective() {
        let inst = identity_instance(3);
        let e = qcqp_eval(&inst, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(e.objective, 5.25);
        assert_eq!(e.objective_grad.as_slice(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn instance_validation() {
        let n = 2;
        let asym = Matrix::from_rows(&[[1.0, 0.5], [0.0, 1.0]]);
        assert!(QcqpInstance::new(asym, Vector::zeros(n), Matrix::identity(n), Vector::zeros(n), 1.0).is_err());
        assert!(QcqpInstance::new(Matrix::identity(n), Vector::zeros(n), Matrix::identity(n), Vector::zeros(n), 0.0).is_err());
        assert!(matches!(
            QcqpInstance::new(Matrix::identity(3), Vector::zeros(n), Matrix::identity(n), Vector::zeros(n), 1.0),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(qcqp_eval(&identity_instance(2), &[0.0]).is_err());
    }

    #[test]
    fn generated_tasks_start_infeasible() {
        let gen = InstanceGenerator::default();
        let mut rng = SeededRng::new(4);
        for _ in 0..20 {
            let task = gen.infeasible_task(&mut rng);
            assert!(task.eval_start().constraint > 0.0);
            let d = task.start.sub(&task.instance.x0).norm();
            assert!((d - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fisar_requires_an_optimizer() {
        let task = QcqpTask { instance: identity_instance(2), start: Vector::from(vec![2.0, 0.0]) };
        assert!(run_solver(&task, QcqpSolver::Fisar, None, &BenchmarkConfig::default()).is_err());
    }

    #[test]
    fn csv_layout() {
        let task = QcqpTask { instance: identity_instance(1), start: Vector::from(vec![2.0]) };
        let cfg = BenchmarkConfig { steps: 1, ..BenchmarkConfig::default() };
        let curves = run_qcqp_benchmark(&task, &[QcqpSolver::Sgd], None, &cfg).unwrap();
        let mut buf = Vec::new();
        write_curves_csv(&mut buf, &curves).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,solver,objective,violation");
        assert_eq!(lines[1], "0,sgd,4.0000000000000000e0,3.0000000000000000e0");
        assert_eq!(lines.len(), 3);
    }
}
