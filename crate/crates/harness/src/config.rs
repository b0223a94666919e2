//! Experiment configuration: one TOML file per experiment, defaults equal
//! to the published hyperparameter table, unknown keys rejected.

use std::path::{Path, PathBuf};

use fisar_core::cmdp_env::NavConfig;
use fisar_core::meta_opt::{CellShape, UnrollConfig};
use fisar_core::policy::{EstimatorOptions, DEFAULT_HIDDEN};
use fisar_core::qcqp::InstanceGenerator;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// Environment variable naming the directory relative output paths are
/// resolved against.
pub const OUTPUT_ROOT_ENV: &str = "FISAR_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Qcqp,
    MetaTrain,
    NavTrain,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Qcqp => "qcqp",
            Experiment::MetaTrain => "meta-train",
            Experiment::NavTrain => "nav-train",
        }
    }
}

/// Task family the meta-optimizer is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaTask {
    Qcqp,
    Nav,
}

/// Learning rates of the hand-designed comparison rules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Step size of the one-step projected policy gradient.
    pub policy_lr: f64,
    pub adam_lr: f64,
    pub rmsprop_lr: f64,
    pub sgd_lr: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { policy_lr: 0.001, adam_lr: 0.01, rmsprop_lr: 0.01, sgd_lr: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden: usize,
    /// Trajectories per gradient estimate.
    pub trajectories: usize,
    pub estimator: EstimatorOptions,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { hidden: DEFAULT_HIDDEN, trajectories: 24, estimator: EstimatorOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QcqpConfig {
    pub generator: InstanceGenerator,
    /// Solver iterations per benchmark instance.
    pub steps: usize,
    /// Held-out instances with an infeasible start.
    pub held_out: usize,
    /// Instances whose unconstrained optimum is feasible.
    pub feasible_optimum: usize,
}

impl Default for QcqpConfig {
    fn default() -> Self {
        QcqpConfig { generator: InstanceGenerator::default(), steps: 1000, held_out: 32, feasible_optimum: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub task: MetaTask,
    pub outer_steps: usize,
    /// Trained optimizer to load instead of training one per seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig { task: MetaTask::Nav, outer_steps: 10, checkpoint: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NavTrainConfig {
    /// Policy updates per run.
    pub iterations: usize,
}

impl Default for NavTrainConfig {
    fn default() -> Self {
        NavTrainConfig { iterations: 500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Seeds run concurrently; each owns its streams and output files.
    pub workers: usize,
    /// Slope `k` of the class-κ function `α(c) = k·c`.
    pub kappa_slope: f64,
    pub unroll: UnrollConfig,
    pub cell: CellShape,
    pub baselines: BaselineConfig,
    pub meta: MetaConfig,
    pub nav: NavConfig,
    pub policy: PolicyConfig,
    pub nav_train: NavTrainConfig,
    pub qcqp: QcqpConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: Experiment::NavTrain,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("runs"),
            workers: 1,
            kappa_slope: 20.0,
            unroll: UnrollConfig::default(),
            cell: CellShape::default(),
            baselines: BaselineConfig::default(),
            meta: MetaConfig::default(),
            nav: NavConfig::default(),
            policy: PolicyConfig::default(),
            nav_train: NavTrainConfig::default(),
            qcqp: QcqpConfig::default(),
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Iterations of the experiment's main loop.
    pub steps: Option<usize>,
}

/// Maps a core `"key: message"` validation error into the section `prefix`.
fn scoped(prefix: &str, err: fisar_core::Error) -> HarnessError {
    match err {
        fisar_core::Error::InvalidArgument(msg) => match msg.split_once(": ") {
            Some((key, rest)) => HarnessError::config(format!("{prefix}.{key}"), rest),
            None => HarnessError::config(prefix, msg),
        },
        other => HarnessError::config(prefix, other.to_string()),
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::config(key, format!("must be positive, got {v}")))
    }
}

fn at_least_one(key: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(HarnessError::config(key, "must be at least 1"))
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_owned();
            let key = unknown_key(&message).unwrap_or_else(|| "<document>".to_owned());
            HarnessError::config(key, message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Canonical serialization; the manifest hash is taken over it.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of [`ExperimentConfig::to_toml`].
    pub fn hash(&self) -> String {
        hex_digest(self.to_toml().as_bytes())
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seeds = vec![seed];
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        if let Some(steps) = o.steps {
            match self.experiment {
                Experiment::Qcqp => self.qcqp.steps = steps,
                Experiment::MetaTrain => self.meta.outer_steps = steps,
                Experiment::NavTrain => self.nav_train.iterations = steps,
            }
        }
        self.validate()
    }

    /// Output directory after resolving against [`OUTPUT_ROOT_ENV`].
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HarnessError::config("seeds", "need at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(HarnessError::config("seeds", "seeds must be distinct"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(HarnessError::config("output_dir", "must not be empty"));
        }
        at_least_one("workers", self.workers)?;
        positive("kappa_slope", self.kappa_slope)?;
        self.unroll.validate().map_err(|e| scoped("unroll", e))?;
        self.cell.validate().map_err(|e| scoped("cell", e))?;
        let b = &self.baselines;
        positive("baselines.policy_lr", b.policy_lr)?;
        positive("baselines.adam_lr", b.adam_lr)?;
        positive("baselines.rmsprop_lr", b.rmsprop_lr)?;
        positive("baselines.sgd_lr", b.sgd_lr)?;
        at_least_one("meta.outer_steps", self.meta.outer_steps)?;
        self.nav.validate().map_err(|e| scoped("nav", e))?;
        at_least_one("policy.hidden", self.policy.hidden)?;
        at_least_one("policy.trajectories", self.policy.trajectories)?;
        at_least_one("nav_train.iterations", self.nav_train.iterations)?;
        self.qcqp.generator.validate().map_err(|e| scoped("qcqp.generator", e))?;
        at_least_one("qcqp.held_out", self.qcqp.held_out)?;
        Ok(())
    }
}

/// Extracts the field name from a serde "unknown field `x`" message.
fn unknown_key(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    rest.split('`').next().map(str::to_owned)
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
