//! Particle navigation with obstacle and boundary cost channels.
//!
//! Double-integrator dynamics in the plane. Reward is the negative distance
//! to the goal; each circular obstacle has a cost channel that is
//! `2·exp(−distance to center) + 0.5` inside the circle and zero outside,
//! and a last channel charges 1 per step spent outside the box. Costs and
//! reward use the post-step position before it is clamped to the box.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Axis-aligned box `lo ≤ p ≤ hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Bounds {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|i| p[i] >= self.lo[i] && p[i] <= self.hi[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NavConfig {
    pub goal: [f64; 2],
    pub obstacles: Vec<Obstacle>,
    pub bounds: Bounds,
    pub dt: f64,
    pub horizon: usize,
    pub gamma: f64,
    /// `C̄_i`, one per obstacle followed by the boundary channel.
    pub caps: Vec<f64>,
    /// Per-coordinate bound on the applied acceleration.
    pub action_limit: f64,
    pub start: [f64; 2],
    /// Half-width of the uniform start jitter per coordinate.
    pub start_jitter: f64,
}

impl Default for NavConfig {
    fn default() -> Self {
        NavConfig {
            goal: [0.8, 0.8],
            obstacles: vec![Obstacle { center: [-0.3, 0.0], radius: 0.25 }, Obstacle { center: [0.3, 0.3], radius: 0.25 }],
            bounds: Bounds { lo: [-1.0, -1.0], hi: [1.0, 1.0] },
            dt: 0.1,
            horizon: 100,
            gamma: 0.99,
            caps: vec![2.0, 2.0, 1.0],
            action_limit: 1.0,
            start: [-0.8, -0.8],
            start_jitter: 0.05,
        }
    }
}

impl NavConfig {
    /// Obstacle channels plus the boundary channel.
    pub fn channels(&self) -> usize {
        self.obstacles.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::InvalidArgument(format!("{key}: {msg}")));
        let b = self.bounds;
        if !(0..2).all(|i| b.lo[i] < b.hi[i] && b.lo[i].is_finite() && b.hi[i].is_finite()) {
            return bad("bounds", format!("need finite lo < hi, got {:?}", b));
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.radius > 0.0 && o.radius.is_finite()) {
                return bad("obstacles", format!("obstacle {i} radius must be positive, got {}", o.radius));
            }
            if !b.contains(o.center) {
                return bad("obstacles", format!("obstacle {i} center {:?} lies outside the bounds", o.center));
            }
        }
        if !self.goal.iter().all(|g| g.is_finite()) {
            return bad("goal", "must be finite".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt", format!("must be positive, got {}", self.dt));
        }
        if self.horizon == 0 {
            return bad("horizon", "must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma", format!("must lie in (0, 1), got {}", self.gamma));
        }
        if self.caps.len() != self.channels() {
            return bad("caps", format!("expected {} entries, got {}", self.channels(), self.caps.len()));
        }
        if let Some(c) = self.caps.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return bad("caps", format!("must be non-negative, got {c}"));
        }
        if !(self.action_limit > 0.0 && self.action_limit.is_finite()) {
            return bad("action_limit", format!("must be positive, got {}", self.action_limit));
        }
        if !(self.start_jitter >= 0.0 && self.start_jitter.is_finite() && self.start.iter().all(|s| s.is_finite())) {
            return bad("start_jitter", format!("must be non-negative, got {}", self.start_jitter));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

impl NavState {
    pub fn at_rest(position: [f64; 2]) -> Self {
        NavState { position, velocity: [0.0, 0.0] }
    }

    /// Policy input `(x, y, vx, vy)`.
    pub fn features(&self) -> [f64; 4] {
        [self.position[0], self.position[1], self.velocity[0], self.velocity[1]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: NavState,
    pub reward: f64,
    pub costs: Vec<f64>,
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Per-channel cost at position `p`.
pub fn costs_at(cfg: &NavConfig, p: [f64; 2]) -> Vec<f64> {
    let mut costs: Vec<f64> = cfg
        .obstacles
        .iter()
        .map(|o| {
            let d = distance(p, o.center);
            if d <= o.radius {
                2.0 * (-d).exp() + 0.5
            } else {
                0.0
            }
        })
        .collect();
    costs.push(if cfg.bounds.contains(p) { 0.0 } else { 1.0 });
    costs
}

/// One step under acceleration `a`, clipped to `±action_limit`.
pub fn env_step(cfg: &NavConfig, s: &NavState, a: [f64; 2]) -> StepOutcome {
    let dt = cfg.dt;
    let mut position = [0.0; 2];
    let mut velocity = [0.0; 2];
    for i in 0..2 {
        let acc = a[i].clamp(-cfg.action_limit, cfg.action_limit);
        position[i] = s.position[i] + s.velocity[i] * dt + 0.5 * acc * dt * dt;
        velocity[i] = s.velocity[i] + acc * dt;
    }
    let reward = -distance(position, cfg.goal);
    let costs = costs_at(cfg, position);
    // Clamping stops the particle at the wall; outward velocity is lost.
    for i in 0..2 {
        if position[i] < cfg.bounds.lo[i] {
            position[i] = cfg.bounds.lo[i];
            velocity[i] = velocity[i].max(0.0);
        } else if position[i] > cfg.bounds.hi[i] {
            position[i] = cfg.bounds.hi[i];
            velocity[i] = velocity[i].min(0.0);
        }
    }
    StepOutcome { state: NavState { position, velocity }, reward, costs }
}

/// Stochastic state-feedback controller.
pub trait ActionPolicy {
    /// Draws an action at `s`. The returned action is the sampled one, before
    /// the environment clips it.
    fn sample(&self, s: &NavState, rng: &mut SeededRng) -> [f64; 2];
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    /// State the action was taken in.
    pub state: NavState,
    pub action: [f64; 2],
    pub reward: f64,
    pub costs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
    pub final_state: NavState,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Samples a start state: `start` plus uniform jitter, at rest.
pub fn initial_state(cfg: &NavConfig, rng: &mut SeededRng) -> NavState {
    let j = cfg.start_jitter;
    NavState::at_rest([cfg.start[0] + rng.uniform_range(-j, j), cfg.start[1] + rng.uniform_range(-j, j)])
}

/// Runs one episode of exactly `cfg.horizon` steps from the stream `rng`.
pub fn rollout_with<P: ActionPolicy + ?Sized>(cfg: &NavConfig, policy: &P, rng: &mut SeededRng) -> Trajectory {
    let mut state = initial_state(cfg, rng);
    let mut steps = Vec::with_capacity(cfg.horizon);
    for _ in 0..cfg.horizon {
        let action = policy.sample(&state, rng);
        let out = env_step(cfg, &state, action);
        steps.push(Transition { state, action, reward: out.reward, costs: out.costs });
        state = out.state;
    }
    Trajectory { steps, final_state: state }
}

/// [`rollout_with`] on a fresh stream for `seed`.
pub fn rollout<P: ActionPolicy + ?Sized>(cfg: &NavConfig, policy: &P, seed: u64) -> Trajectory {
    rollout_with(cfg, policy, &mut SeededRng::new(seed))
}

/// `G = Σ γᵗ r_t` and `C_i = Σ γᵗ c_{i,t} − C̄_i`. The discount is a running
/// product, so `γᵗ` is `t` successive multiplications.
pub fn discounted_totals(traj: &Trajectory, gamma: f64, caps: &[f64]) -> (f64, Vec<f64>) {
    let (ret, costs) = discounted_sums(traj, gamma, caps.len());
    (ret, costs.iter().zip(caps).map(|(c, cap)| c - cap).collect())
}

/// Discounted reward and per-channel cost sums without caps.
pub fn discounted_sums(traj: &Trajectory, gamma: f64, channels: usize) -> (f64, Vec<f64>) {
    let mut ret = 0.0;
    let mut costs = vec![0.0; channels];
    let mut discount = 1.0;
    for step in &traj.steps {
        ret += discount * step.reward;
        for (acc, c) in costs.iter_mut().zip(&step.costs) {
            *acc += discount * c;
        }
        discount *= gamma;
    }
    (ret, costs)
}

/// `t,x,y,vx,vy,ax,ay,reward,cost_0..` rows with 17 significant digits.
pub fn write_trajectory_csv<W: Write>(out: &mut W, traj: &Trajectory) -> io::Result<()> {
    let channels = traj.steps.first().map_or(0, |s| s.costs.len());
    write!(out, "t,x,y,vx,vy,ax,ay,reward")?;
    for i in 0..channels {
        write!(out, ",cost_{i}")?;
    }
    writeln!(out)?;
    for (t, s) in traj.steps.iter().enumerate() {
        let [x, y, vx, vy] = s.state.features();
        write!(out, "{t},{x:.16e},{y:.16e},{vx:.16e},{vy:.16e},{:.16e},{:.16e},{:.16e}", s.action[0], s.action[1], s.reward)?;
        for c in &s.costs {
            write!(out, ",{c:.16e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
