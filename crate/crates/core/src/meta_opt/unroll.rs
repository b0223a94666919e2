//! Unrolled meta-loss and its gradient with respect to φ.
//!
//! Along the unroll `θ_{k+1} = θ_k + β·proj(m_φ(∇J(θ_k)))` the inputs
//! `∇J(θ_k)` and the polytopes `(A_k, b_k)` are held constant with respect
//! to φ. With those edges cut, `∂θ_j/∂θ_k = I` and the adjoint of the
//! projected direction at step `k` is `β·Σ_{j>k} (−w_j ∇J(θ_j))` over the
//! current segment. It is pulled back through the projection and then
//! through the recorded cell steps in a single reverse sweep.

use serde::{Deserialize, Serialize};

use super::cell::{encode_gradient, CoordOptimizerState, RecurrentOptimizer};
use crate::constraint_dynamics::{build_update_polytope, ConstraintEval, KappaFn};
use crate::error::{Error, Result};
use crate::ndcore::{Matrix, Tape, Var, Vector};
use crate::projection::{ProjectionMetric, DEFAULT_DELTA};

/// Objective, gradient and constraints at one iterate. `J` is maximized.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub objective: f64,
    pub gradient: Vector,
    pub constraints: ConstraintEval,
}

/// An inner problem the meta-optimizer is trained or evaluated on.
pub trait InnerProblem {
    fn dim(&self) -> usize;

    fn initial_theta(&self) -> Vector;

    /// Evaluates `J`, `∇J` and the constraints at `theta`. May be
    /// stochastic; each iterate is evaluated exactly once per unroll.
    fn evaluate(&mut self, theta: &[f64]) -> Result<Evaluation>;
}

impl<T: InnerProblem + ?Sized> InnerProblem for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn initial_theta(&self) -> Vector {
        (**self).initial_theta()
    }

    fn evaluate(&mut self, theta: &[f64]) -> Result<Evaluation> {
        (**self).evaluate(theta)
    }
}

impl<T: InnerProblem + ?Sized> InnerProblem for &mut T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn initial_theta(&self) -> Vector {
        (**self).initial_theta()
    }

    fn evaluate(&mut self, theta: &[f64]) -> Result<Evaluation> {
        (**self).evaluate(theta)
    }
}

/// How φ is updated from the meta-gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaRule {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnrollConfig {
    /// Unroll length `T_φ`.
    pub span: usize,
    /// `w_1..w_T`; empty means all ones.
    pub weights: Vec<f64>,
    pub beta: f64,
    pub meta_lr: f64,
    pub batch: usize,
    /// Steps per backpropagation segment.
    pub truncation: usize,
    /// Null-space scale of the projection metric.
    pub delta: f64,
    pub meta_rule: MetaRule,
}

impl Default for UnrollConfig {
    fn default() -> Self {
        UnrollConfig {
            span: 120,
            weights: Vec::new(),
            beta: 0.001,
            meta_lr: 0.05,
            batch: 24,
            truncation: 20,
            delta: DEFAULT_DELTA,
            meta_rule: MetaRule::Adam,
        }
    }
}

impl UnrollConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::InvalidArgument(format!("{key}: {msg}")));
        if self.span == 0 {
            return bad("span", "must be at least 1".into());
        }
        if !self.weights.is_empty() && self.weights.len() != self.span {
            return bad("weights", format!("expected {} entries, got {}", self.span, self.weights.len()));
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return bad("weights", format!("must be positive, got {w}"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta", format!("must be positive, got {}", self.beta));
        }
        if !(self.meta_lr > 0.0 && self.meta_lr.is_finite()) {
            return bad("meta_lr", format!("must be positive, got {}", self.meta_lr));
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1".into());
        }
        if self.truncation == 0 {
            return bad("truncation", "must be at least 1".into());
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("delta", format!("must be positive, got {}", self.delta));
        }
        Ok(())
    }

    /// `w_k` for the iterate `θ_k`, `k ≥ 1`.
    pub fn weight(&self, k: usize) -> f64 {
        if self.weights.is_empty() {
            1.0
        } else {
            self.weights[k - 1]
        }
    }
}

/// Per-iterate diagnostics of one problem.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UnrollTrace {
    /// `J(θ_k)` for `k = 0..=T`.
    pub objective: Vec<f64>,
    /// `max_i max(C_i(θ_k), 0)` for `k = 0..=T`.
    pub violation: Vec<f64>,
    /// Largest `(A_k d_k − b_k)_i` over the unroll; ≤ 0 up to rounding.
    pub max_polytope_residual: f64,
}

/// Result of unrolling a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct UnrollOutcome {
    /// `−Σ_k w_k J(θ_k)` averaged over the batch.
    pub loss: f64,
    /// Batch-averaged meta-gradient (zero vector when not requested).
    pub phi_grad: Vector,
    pub thetas: Vec<Vector>,
    pub traces: Vec<UnrollTrace>,
}

struct StepRecord {
    output: Var,
    x0: Vec<Vector>,
    b: Vec<Vector>,
    metric: Vec<ProjectionMetric>,
    next_grad: Vec<Vector>,
}

/// Batch unroll state that persists across truncation segments.
pub(crate) struct BatchUnroll<'a, P: InnerProblem> {
    opt: RecurrentOptimizer,
    cfg: &'a UnrollConfig,
    kappa: KappaFn,
    pub(crate) problems: Vec<P>,
    offsets: Vec<usize>,
    pub(crate) thetas: Vec<Vector>,
    evals: Vec<Evaluation>,
    state: CoordOptimizerState,
    pub(crate) traces: Vec<UnrollTrace>,
    /// Index of the current iterate.
    pub(crate) k: usize,
}

fn max_violation(cons: &ConstraintEval) -> f64 {
    cons.values.iter().fold(0.0f64, |m, c| m.max(c.max(0.0)))
}

impl<'a, P: InnerProblem> BatchUnroll<'a, P> {
    pub(crate) fn start(opt: &RecurrentOptimizer, cfg: &'a UnrollConfig, kappa: KappaFn, mut problems: Vec<P>) -> Result<Self> {
        if problems.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut offsets = Vec::with_capacity(problems.len() + 1);
        offsets.push(0);
        let mut thetas = Vec::with_capacity(problems.len());
        let mut evals = Vec::with_capacity(problems.len());
        let mut traces = Vec::with_capacity(problems.len());
        for p in &mut problems {
            let theta = p.initial_theta();
            if theta.len() != p.dim() {
                return Err(Error::DimensionMismatch(format!("initial theta {} for dim {}", theta.len(), p.dim())));
            }
            let ev = p.evaluate(&theta)?;
            check_eval(&ev, theta.len(), 0)?;
            traces.push(UnrollTrace {
                objective: vec![ev.objective],
                violation: vec![max_violation(&ev.constraints)],
                max_polytope_residual: f64::NEG_INFINITY,
            });
            offsets.push(offsets.last().unwrap() + theta.len());
            thetas.push(theta);
            evals.push(ev);
        }
        let state = CoordOptimizerState::zeros(*offsets.last().unwrap(), opt.shape());
        Ok(BatchUnroll { opt: opt.clone(), cfg, kappa, problems, offsets, thetas, evals, state, traces, k: 0 })
    }

    pub(crate) fn set_optimizer(&mut self, opt: &RecurrentOptimizer) {
        self.opt = opt.clone();
    }

    fn coords(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Advances `steps` iterates. Returns the segment's batch-summed loss
    /// and, when `want_grad`, the batch-summed φ-gradient.
    pub(crate) fn segment(&mut self, steps: usize, want_grad: bool) -> Result<(f64, Option<Vector>)> {
        let rows = self.coords();
        let beta = self.cfg.beta;
        let mut tape = Tape::new();
        let phi = self.opt.register(&mut tape, rows, want_grad);
        let mut state: Vec<(Var, Var)> = self
            .state
            .hidden
            .iter()
            .zip(&self.state.cell)
            .map(|(h, c)| (tape.constant(h.clone()), tape.constant(c.clone())))
            .collect();
        let mut records: Vec<StepRecord> = Vec::with_capacity(steps);
        let mut loss = 0.0;

        for _ in 0..steps {
            let stacked: Vec<f64> = self.evals.iter().flat_map(|e| e.gradient.iter().copied()).collect();
            let input = tape.constant(encode_gradient(&stacked));
            let (output, next) = self.opt.cell_forward(&mut tape, &phi, input, &state);
            state = next;
            let out = tape.value(output).as_slice().to_vec();
            let mut rec = StepRecord { output, x0: vec![], b: vec![], metric: vec![], next_grad: vec![] };
            let w = self.cfg.weight(self.k + 1);
            for p in 0..self.problems.len() {
                let x0 = Vector::from(&out[self.offsets[p]..self.offsets[p + 1]]);
                let poly = build_update_polytope(&self.evals[p].constraints, self.kappa)?;
                let metric = ProjectionMetric::build(poly.a(), self.cfg.delta)?;
                let dir = metric.project(&x0, poly.b())?.x;
                let trace = &mut self.traces[p];
                trace.max_polytope_residual = trace.max_polytope_residual.max(poly.max_violation(&dir));
                self.thetas[p].axpy(beta, &dir);
                let ev = self.problems[p].evaluate(&self.thetas[p])?;
                check_eval(&ev, self.thetas[p].len(), self.k + 1)?;
                loss -= w * ev.objective;
                trace.objective.push(ev.objective);
                trace.violation.push(max_violation(&ev.constraints));
                if want_grad {
                    rec.x0.push(x0);
                    rec.b.push(poly.b().clone());
                    rec.metric.push(metric);
                    rec.next_grad.push(ev.gradient.clone());
                }
                self.evals[p] = ev;
            }
            self.k += 1;
            if want_grad {
                records.push(rec);
            }
        }
        self.state = CoordOptimizerState {
            hidden: state.iter().map(|(h, _)| tape.value(*h).clone()).collect(),
            cell: state.iter().map(|(_, c)| tape.value(*c).clone()).collect(),
        };
        if !self.state.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.k });
        }
        if !want_grad {
            return Ok((loss, None));
        }

        // Reverse pass over θ-adjoints, then one sweep through the tape.
        let mut adj_theta: Vec<Vector> = self.thetas.iter().map(|t| Vector::zeros(t.len())).collect();
        let mut surrogate: Option<Var> = None;
        let k_end = self.k;
        for (s, rec) in records.iter().enumerate().rev() {
            let w = self.cfg.weight(k_end - (records.len() - 1 - s));
            let mut seed = Vec::with_capacity(rows);
            for (p, adj) in adj_theta.iter_mut().enumerate() {
                adj.axpy(-w, &rec.next_grad[p]);
                let adj_dir = adj.scaled(beta);
                seed.extend(rec.metric[p].project_vjp(&rec.x0[p], &rec.b[p], &adj_dir)?.iter().copied());
            }
            let seed = tape.constant(Matrix::column(&seed));
            let prod = tape.mul(rec.output, seed);
            let term = tape.sum(prod);
            surrogate = Some(match surrogate {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        }
        let grads = tape.backward(surrogate.expect("at least one step"))?;
        let mut flat = Vec::with_capacity(self.opt.param_count());
        for &leaf in phi.leaves() {
            let (r, c) = tape.value(leaf).shape();
            flat.extend_from_slice(grads.get_or_zeros(leaf, r, c)?.as_slice());
        }
        Ok((loss, Some(Vector::from(flat))))
    }

    pub(crate) fn finish(self, loss: f64, grad: Option<Vector>) -> UnrollOutcome {
        let b = self.problems.len() as f64;
        let count = self.opt.param_count();
        UnrollOutcome {
            loss: loss / b,
            phi_grad: grad.map_or_else(|| Vector::zeros(count), |g| g.scaled(1.0 / b)),
            thetas: self.thetas,
            traces: self.traces,
        }
    }
}

fn check_eval(ev: &Evaluation, n: usize, step: usize) -> Result<()> {
    if !ev.objective.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    if ev.gradient.len() != n || ev.constraints.gradients.cols() != n {
        return Err(Error::DimensionMismatch(format!("evaluation at step {step} does not match dimension {n}")));
    }
    if !ev.gradient.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    Ok(())
}

/// Unrolls `cfg.span` steps on a batch of problems, backpropagating within
/// segments of `cfg.truncation` steps. The returned gradient is the sum of
/// the segment gradients, each taken with the state entering the segment
/// held fixed.
pub fn unroll_loss<P: InnerProblem>(
    opt: &RecurrentOptimizer,
    problems: Vec<P>,
    cfg: &UnrollConfig,
    kappa: KappaFn,
) -> Result<UnrollOutcome> {
    cfg.validate()?;
    let mut run = BatchUnroll::start(opt, cfg, kappa, problems)?;
    let mut loss = 0.0;
    let mut grad = Vector::zeros(opt.param_count());
    while run.k < cfg.span {
        let steps = cfg.truncation.min(cfg.span - run.k);
        let (l, g) = run.segment(steps, true)?;
        loss += l;
        grad.axpy(1.0, &g.expect("gradient requested"));
    }
    Ok(run.finish(loss, Some(grad)))
}

/// Runs the meta-optimizer for `steps` iterates without recording
/// gradients (evaluation mode).
pub fn run_optimizer<P: InnerProblem>(
    opt: &RecurrentOptimizer,
    problem: P,
    steps: usize,
    beta: f64,
    delta: f64,
    kappa: KappaFn,
) -> Result<(Vector, UnrollTrace)> {
    let cfg = UnrollConfig { span: steps.max(1), beta, delta, batch: 1, truncation: 1, ..UnrollConfig::default() };
    cfg.validate()?;
    let mut run = BatchUnroll::start(opt, &cfg, kappa, vec![problem])?;
    while run.k < steps {
        let n = cfg.truncation.min(steps - run.k);
        run.segment(n, false)?;
    }
    let outcome = run.finish(0.0, None);
    Ok((outcome.thetas.into_iter().next().unwrap(), outcome.traces.into_iter().next().unwrap()))
}
