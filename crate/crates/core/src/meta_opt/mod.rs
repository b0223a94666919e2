//! Learned coordinatewise optimizer for constrained problems.
//!
//! A recurrent cell stack maps each coordinate's preprocessed gradient to a
//! raw update direction; the direction is projected onto the update
//! polytope before it is applied, so safety does not depend on how well φ
//! is trained.

mod cell;
mod train;
mod unroll;

pub use cell::{optimizer_step, preprocess, CellShape, CoordOptimizerState, RecurrentOptimizer, PREPROCESS_P};
pub use train::{
    train_meta, ConstrainedQuadratic, MetaTrainer, OuterStepLog, QuadraticTaskSampler, TaskSampler, MAX_CONSECUTIVE_FAILURES,
};
pub use unroll::{run_optimizer, unroll_loss, Evaluation, InnerProblem, MetaRule, UnrollConfig, UnrollOutcome, UnrollTrace};
