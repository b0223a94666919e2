//! Forward-invariant constrained optimization.
//!
//! Constraint values `C_i(θ)` are treated as Lyapunov functions of the
//! parameter update dynamics: every update direction `θ̇` must satisfy
//! `∇C_i · θ̇ ≤ -α C_i`, a polytope in direction space. Directions come from
//! a coordinatewise recurrent meta-optimizer and are made feasible with a
//! closed-form projection under a metric chosen so the projection dual is
//! separable.

pub mod baselines;
pub mod cmdp_env;
pub mod constraint_dynamics;
pub mod error;
pub mod meta_opt;
pub mod ndcore;
pub mod policy;
pub mod projection;
pub mod qcqp;

pub use error::{Error, Result};
