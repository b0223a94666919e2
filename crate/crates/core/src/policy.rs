//! Gaussian MLP policy and score-function gradient estimates.
//!
//! The mean is `W₂ tanh(W₁ s + b₁) + b₂` with one hidden layer; the
//! log-standard deviation is a state-independent parameter vector. Reward
//! and every cost channel are estimated with the same identity
//! `∇E[G] = E[G(τ) Σ_t ∇ log π(a_t | s_t)]`.

use std::fmt::Write as _;

use crate::cmdp_env::{discounted_sums, ActionPolicy, NavState, Trajectory};
use crate::error::{Error, Result};
use crate::ndcore::{Matrix, SeededRng, Tape, Var, Vector};

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;
pub const DEFAULT_HIDDEN: usize = 16;
/// The standard deviation never drops below `exp(LOG_STD_FLOOR)`.
pub const LOG_STD_FLOOR: f64 = -5.0;

const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_8;
const CHECKPOINT_MAGIC: &str = "fisar-gaussian-mlp-policy v1";

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMlpPolicy {
    hidden: usize,
    /// `STATE_DIM × hidden`
    w1: Matrix,
    b1: Matrix,
    /// `hidden × ACTION_DIM`
    w2: Matrix,
    b2: Matrix,
    log_std: Matrix,
}

struct PolicyVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    log_std: Var,
}

impl GaussianMlpPolicy {
    /// Weights uniform on `±1/√fan_in`, zero biases, `log σ = ln 0.5`.
    pub fn new(hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::InvalidArgument("hidden: must be at least 1".into()));
        }
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.uniform_range(-bound, bound)).collect();
            Matrix::from_vec(rows, cols, data).expect("shape")
        };
        let w1 = uniform(STATE_DIM, hidden, STATE_DIM);
        let w2 = uniform(hidden, ACTION_DIM, hidden);
        Ok(GaussianMlpPolicy {
            hidden,
            w1,
            b1: Matrix::zeros(1, hidden),
            w2,
            b2: Matrix::zeros(1, ACTION_DIM),
            log_std: Matrix::filled(1, ACTION_DIM, 0.5f64.ln()),
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn param_count(&self) -> usize {
        (STATE_DIM + 1) * self.hidden + (self.hidden + 1) * ACTION_DIM + ACTION_DIM
    }

    /// Flattened `[W₁, b₁, W₂, b₂, log σ]`, each row-major.
    pub fn params(&self) -> Vector {
        let mut out = Vec::with_capacity(self.param_count());
        for m in [&self.w1, &self.b1, &self.w2, &self.b2, &self.log_std] {
            out.extend_from_slice(m.as_slice());
        }
        Vector::from(out)
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!("policy has {} parameters, got {}", self.param_count(), params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteInput("policy parameters".into()));
        }
        let mut offset = 0;
        for m in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.log_std] {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&params[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_params(params)?;
        Ok(out)
    }

    /// `σ = exp(max(log σ, LOG_STD_FLOOR))`.
    pub fn std(&self) -> [f64; ACTION_DIM] {
        let ls = self.log_std.as_slice();
        [ls[0].max(LOG_STD_FLOOR).exp(), ls[1].max(LOG_STD_FLOOR).exp()]
    }

    pub fn mean(&self, s: &[f64; STATE_DIM]) -> [f64; ACTION_DIM] {
        let mut out = [self.b2[(0, 0)], self.b2[(0, 1)]];
        for h in 0..self.hidden {
            let mut z = self.b1[(0, h)];
            for (i, si) in s.iter().enumerate() {
                z += si * self.w1[(i, h)];
            }
            let a = z.tanh();
            for (j, o) in out.iter_mut().enumerate() {
                *o += a * self.w2[(h, j)];
            }
        }
        out
    }

    /// Diagonal-Gaussian log-density of `a` at state features `s`.
    pub fn log_prob(&self, s: &[f64; STATE_DIM], a: &[f64; ACTION_DIM]) -> f64 {
        let mu = self.mean(s);
        let ls = self.log_std.as_slice();
        (0..ACTION_DIM)
            .map(|j| {
                let l = ls[j].max(LOG_STD_FLOOR);
                let z = (a[j] - mu[j]) / l.exp();
                -0.5 * z * z - l - HALF_LN_TWO_PI
            })
            .sum()
    }

    /// `a = μ(s) + σ ⊙ ε` with `ε` standard normal, and `log π(a | s)`.
    pub fn sample_action(&self, s: &NavState, rng: &mut SeededRng) -> ([f64; ACTION_DIM], f64) {
        let f = s.features();
        let mu = self.mean(&f);
        let std = self.std();
        let a = [mu[0] + std[0] * rng.normal(), mu[1] + std[1] * rng.normal()];
        (a, self.log_prob(&f, &a))
    }

    fn register(&self, tape: &mut Tape) -> PolicyVars {
        PolicyVars {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
            log_std: tape.leaf(self.log_std.clone()),
        }
    }

    /// Records `log π(a_r | s_r)` for every row as an `N × 1` node.
    fn log_prob_rows(&self, tape: &mut Tape, vars: &PolicyVars, states: Matrix, actions: Matrix) -> Var {
        let n = states.rows();
        let ones = tape.constant(Matrix::filled(n, 1, 1.0));
        let x = tape.constant(states);
        let a = tape.constant(actions);
        let pre = tape.matmul(x, vars.w1);
        let bias1 = tape.matmul(ones, vars.b1);
        let pre = tape.add(pre, bias1);
        let hidden = tape.tanh(pre);
        let mu = tape.matmul(hidden, vars.w2);
        let bias2 = tape.matmul(ones, vars.b2);
        let mu = tape.add(mu, bias2);
        let ls = tape.max_const(vars.log_std, LOG_STD_FLOOR);
        let ls = tape.matmul(ones, ls);
        let neg_two_ls = tape.scale(ls, -2.0);
        let inv_var = tape.exp(neg_two_ls);
        let diff = tape.sub(a, mu);
        let sq = tape.mul(diff, diff);
        let quad = tape.mul(sq, inv_var);
        let quad = tape.scale(quad, -0.5);
        let per_dim = tape.sub(quad, ls);
        let sum_cols = tape.constant(Matrix::filled(ACTION_DIM, 1, 1.0));
        let logp = tape.matmul(per_dim, sum_cols);
        let norm = tape.constant(Matrix::filled(n, 1, -(ACTION_DIM as f64) * HALF_LN_TWO_PI));
        tape.add(logp, norm)
    }

    fn flatten(&self, tape: &Tape, vars: &PolicyVars, root: Var, seed: Matrix) -> Result<Vector> {
        let grads = tape.backward_seeded(root, seed)?;
        let mut out = Vec::with_capacity(self.param_count());
        for (v, m) in
            [(vars.w1, &self.w1), (vars.b1, &self.b1), (vars.w2, &self.w2), (vars.b2, &self.b2), (vars.log_std, &self.log_std)]
        {
            out.extend_from_slice(grads.get_or_zeros(v, m.rows(), m.cols())?.as_slice());
        }
        Ok(Vector::from(out))
    }

    /// `∇_θ log π(a | s)`.
    pub fn log_prob_grad(&self, s: &[f64; STATE_DIM], a: &[f64; ACTION_DIM]) -> Result<Vector> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let root = self.log_prob_rows(&mut tape, &vars, Matrix::from_rows(&[s]), Matrix::from_rows(&[a]));
        self.flatten(&tape, &vars, root, Matrix::filled(1, 1, 1.0))
    }

    /// Text checkpoint; floats use shortest round-trip formatting.
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(s, "hidden {}", self.hidden);
        let params = self.params();
        let _ = writeln!(s, "params {}", params.len());
        for p in params.iter() {
            let _ = writeln!(s, "{p:?}");
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing header"));
        }
        let mut field = |name: &str| -> Result<usize> {
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            let value = line.strip_prefix(name).and_then(|r| r.strip_prefix(' ')).ok_or_else(|| bad(name))?;
            value.parse().map_err(|_| bad(name))
        };
        let hidden = field("hidden")?;
        let count = field("params")?;
        let params: Vec<f64> = lines.map(|l| l.parse::<f64>().map_err(|_| bad("parameter value"))).collect::<Result<_>>()?;
        if params.len() != count {
            return Err(bad("parameter count"));
        }
        let mut pol = GaussianMlpPolicy::new(hidden, &mut SeededRng::new(0)).map_err(|_| bad("hidden"))?;
        pol.set_params(&params).map_err(|e| bad(&e.to_string()))?;
        Ok(pol)
    }
}

impl ActionPolicy for GaussianMlpPolicy {
    fn sample(&self, s: &NavState, rng: &mut SeededRng) -> [f64; 2] {
        self.sample_action(s, rng).0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorOptions {
    /// Subtract the batch-mean total of each channel from its per-trajectory
    /// total before weighting the score.
    pub baseline: bool,
    /// Weight the score at step `t` by the discounted sum from `t` on
    /// (causality). Same expectation as the whole-trajectory total; with
    /// `baseline` the shift is the batch mean of that sum at each `t`.
    pub reward_to_go: bool,
}

/// Batch estimates of `J`, `∇J`, `C_i − C̄_i` and `∇C_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradEstimate {
    pub objective: f64,
    pub objective_grad: Vector,
    pub constraints: Vector,
    /// One row per channel.
    pub constraint_grads: Matrix,
}

/// Score-function estimates over `batch`. Means are plain batch averages,
/// so the result does not depend on trajectory order beyond rounding.
pub fn estimate_grads(
    pol: &GaussianMlpPolicy,
    batch: &[Trajectory],
    gamma: f64,
    caps: &[f64],
    opts: EstimatorOptions,
) -> Result<GradEstimate> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let channels = caps.len();
    let b = batch.len() as f64;
    let totals: Vec<(f64, Vec<f64>)> = batch.iter().map(|t| discounted_sums(t, gamma, channels)).collect();
    if let Some(t) = batch.iter().find(|t| t.steps.iter().any(|s| s.costs.len() != channels)) {
        return Err(Error::DimensionMismatch(format!(
            "{} caps for a trajectory with {} channels",
            channels,
            t.steps[0].costs.len()
        )));
    }

    let rows: usize = batch.iter().map(Trajectory::len).sum();
    let mut states = Vec::with_capacity(rows * STATE_DIM);
    let mut actions = Vec::with_capacity(rows * ACTION_DIM);
    for t in batch {
        for s in &t.steps {
            states.extend_from_slice(&s.state.features());
            actions.extend_from_slice(&s.action);
        }
    }
    let mut tape = Tape::new();
    let vars = pol.register(&mut tape);
    let logp = pol.log_prob_rows(
        &mut tape,
        &vars,
        Matrix::from_vec(rows, STATE_DIM, states)?,
        Matrix::from_vec(rows, ACTION_DIM, actions)?,
    );

    // Channel 0 is the reward, channels 1.. the costs.
    let per_channel: Vec<Vec<f64>> =
        (0..=channels).map(|c| totals.iter().map(|(g, cs)| if c == 0 { *g } else { cs[c - 1] }).collect()).collect();
    let means: Vec<f64> = per_channel.iter().map(|v| v.iter().sum::<f64>() / b).collect();
    let seeds: Vec<Vec<f64>> = if opts.reward_to_go {
        to_go_seeds(batch, gamma, channels, opts.baseline)
    } else {
        per_channel
            .iter()
            .enumerate()
            .map(|(c, values)| {
                let shift = if opts.baseline { means[c] } else { 0.0 };
                let mut seed = Vec::with_capacity(rows);
                for (t, v) in batch.iter().zip(values) {
                    seed.extend(std::iter::repeat_n(v - shift, t.len()));
                }
                seed
            })
            .collect()
    };
    let mut grads = Vec::with_capacity(channels + 1);
    for seed in seeds {
        let seed: Vec<f64> = seed.into_iter().map(|v| v / b).collect();
        grads.push(pol.flatten(&tape, &vars, logp, Matrix::from_vec(rows, 1, seed)?)?);
    }

    let objective_grad = grads.remove(0);
    let mut constraint_grads = Matrix::zeros(channels, pol.param_count());
    for (i, g) in grads.iter().enumerate() {
        constraint_grads.row_mut(i).copy_from_slice(g);
    }
    let constraints = means[1..].iter().zip(caps).map(|(m, cap)| m - cap).collect();
    Ok(GradEstimate { objective: means[0], objective_grad, constraints, constraint_grads })
}

/// Per-row weights `Σ_{t' ≥ t} γ^{t'} x_{t'}` for every channel (reward
/// first), in batch row order. With `baseline` the batch mean at each `t`
/// over trajectories still running at `t` is subtracted.
fn to_go_seeds(batch: &[Trajectory], gamma: f64, channels: usize, baseline: bool) -> Vec<Vec<f64>> {
    let longest = batch.iter().map(Trajectory::len).max().unwrap_or(0);
    let mut per_traj: Vec<Vec<Vec<f64>>> = Vec::with_capacity(batch.len());
    for traj in batch {
        let mut discounts = Vec::with_capacity(traj.len());
        let mut d = 1.0;
        for _ in &traj.steps {
            discounts.push(d);
            d *= gamma;
        }
        let mut to_go = vec![vec![0.0; traj.len()]; channels + 1];
        let mut acc = vec![0.0; channels + 1];
        for (t, step) in traj.steps.iter().enumerate().rev() {
            acc[0] += discounts[t] * step.reward;
            for (i, c) in step.costs.iter().enumerate() {
                acc[i + 1] += discounts[t] * c;
            }
            for (ch, a) in acc.iter().enumerate() {
                to_go[ch][t] = *a;
            }
        }
        per_traj.push(to_go);
    }
    let mut shift = vec![vec![0.0; longest]; channels + 1];
    if baseline {
        for (ch, row) in shift.iter_mut().enumerate() {
            for (t, s) in row.iter_mut().enumerate() {
                let running: Vec<f64> = per_traj.iter().filter(|tg| tg[ch].len() > t).map(|tg| tg[ch][t]).collect();
                *s = running.iter().sum::<f64>() / running.len() as f64;
            }
        }
    }
    (0..=channels)
        .map(|ch| {
            per_traj.iter().flat_map(|tg| tg[ch].iter().enumerate().map(|(t, v)| v - shift[ch][t]).collect::<Vec<_>>()).collect()
        })
        .collect()
}
