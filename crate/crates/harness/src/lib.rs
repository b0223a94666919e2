//! Configuration, orchestration and artifact plumbing for the benchmark
//! experiments of `fisar-core`.

pub mod config;
pub mod error;
pub mod metrics;
pub mod nav;
pub mod run;

pub use config::{Experiment, ExperimentConfig, MetaTask, Overrides, OUTPUT_ROOT_ENV};
pub use error::{HarnessError, Result};
pub use metrics::{aggregate, Aggregate, MetricTable};
pub use run::{run_experiment, InstanceFinal, Outcome, RunReport, KIND_FEASIBLE_OPTIMUM, KIND_INFEASIBLE_START};
