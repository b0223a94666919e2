//! Experiment orchestration, artifact files and the run manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use fisar_core::constraint_dynamics::KappaFn;
use fisar_core::meta_opt::{train_meta, OuterStepLog, RecurrentOptimizer, TaskSampler};
use fisar_core::ndcore::SeededRng;
use fisar_core::policy::GaussianMlpPolicy;
use fisar_core::qcqp::{run_qcqp_benchmark, BenchmarkConfig, QcqpSolver, QcqpTaskSampler, SolverCurve};
use serde::Serialize;

use crate::config::{hex_digest, Experiment, ExperimentConfig, MetaTask};
use crate::error::{HarnessError, Result};
use crate::metrics::{aggregate, fmt_real, Aggregate, MetricTable};
use crate::nav::{
    records_table, run_fisar, run_projected_pg, NavTaskSampler, UpdateSettings, STREAM_BASELINE_ROLLOUTS, STREAM_FISAR_ROLLOUTS,
    STREAM_POLICY_INIT,
};

/// Stream ids derived from a run seed (the navigation ids live in `nav`).
pub const STREAM_META: u64 = 0;
pub const STREAM_HELD_OUT: u64 = 4;
pub const STREAM_FEASIBLE_OPTIMUM: u64 = 5;

pub const MANIFEST_FILE: &str = "manifest.json";
/// Wall-clock phases; kept out of CSV form because it is not reproducible.
pub const TIMING_FILE: &str = "timing.json";

/// Name of the learned-optimizer rule in file names.
pub const FISAR: &str = "fisar";
/// Name of the one-step projected policy gradient in file names.
pub const PROJECTED_PG: &str = "projected-pg";

/// Final values of one solver on one benchmark instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceFinal {
    pub instance: usize,
    pub kind: &'static str,
    pub solver: QcqpSolver,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub final_violation: f64,
}

pub const KIND_INFEASIBLE_START: &str = "infeasible-start";
pub const KIND_FEASIBLE_OPTIMUM: &str = "feasible-optimum";

#[derive(Clone, Debug)]
pub struct QcqpSeedResult {
    pub seed: u64,
    /// Mean curve over the held-out instances, per solver.
    pub curves: Vec<(QcqpSolver, MetricTable)>,
    pub finals: Vec<InstanceFinal>,
}

#[derive(Clone, Debug)]
pub struct MetaSeedResult {
    pub seed: u64,
    pub log: MetricTable,
    pub optimizer: RecurrentOptimizer,
}

#[derive(Clone, Debug)]
pub struct NavSeedResult {
    pub seed: u64,
    pub fisar: MetricTable,
    pub baseline: MetricTable,
}

#[derive(Clone, Debug)]
pub enum Outcome {
    Qcqp(Vec<QcqpSeedResult>),
    MetaTrain(Vec<MetaSeedResult>),
    NavTrain(Vec<NavSeedResult>),
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub output_dir: PathBuf,
    /// Metric CSVs written, relative to `output_dir`, sorted.
    pub metric_files: Vec<String>,
    /// Cross-seed aggregates keyed by the rule or log they summarize.
    pub aggregates: Vec<(String, Aggregate)>,
    pub outcome: Outcome,
}

#[derive(Serialize)]
struct ManifestFile {
    name: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    experiment: &'a str,
    version: &'a str,
    config_sha256: String,
    seeds: &'a [u64],
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_sha256: Option<String>,
    files: Vec<ManifestFile>,
    /// The full effective configuration; re-running it reproduces the files.
    config: String,
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn table(&mut self, name: String, t: &MetricTable) -> Result<()> {
        t.save(&self.path(&name))?;
        self.files.push(name);
        Ok(())
    }

    fn aggregate(&mut self, name: String, a: &Aggregate) -> Result<()> {
        a.save(&self.path(&name))?;
        self.files.push(name);
        Ok(())
    }

    fn text(&mut self, name: String, body: &str) -> Result<()> {
        let path = self.path(&name);
        std::fs::write(&path, body).map_err(|e| HarnessError::io(path, e))?;
        self.files.push(name);
        Ok(())
    }
}

/// Runs every seed of `cfg` and writes per-seed metric CSVs, cross-seed
/// aggregates, a timing file and the manifest into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let dir = cfg.resolved_output_dir();
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let checkpoint = match &cfg.meta.checkpoint {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
            Some((RecurrentOptimizer::from_checkpoint(&text)?, hex_digest(text.as_bytes())))
        }
        None => None,
    };
    let phi = checkpoint.as_ref().map(|(o, _)| o);

    let mut art = Artifacts { dir: dir.clone(), files: Vec::new() };
    let mut timing: Vec<(u64, &'static str, u128)> = Vec::new();
    let mut aggregates = Vec::new();
    let outcome = match cfg.experiment {
        Experiment::Qcqp => {
            let results = per_seed(cfg, |seed| qcqp_seed(cfg, seed, phi))?;
            let mut out = Vec::new();
            for (r, ms) in results {
                timing.push((r.seed, "qcqp", ms));
                for (solver, t) in &r.curves {
                    art.table(format!("seed_{}_{}.csv", r.seed, solver.name()), t)?;
                }
                art.text(format!("seed_{}_finals.csv", r.seed), &finals_csv(&r.finals))?;
                out.push(r);
            }
            for solver in QcqpSolver::ALL {
                let tables: Vec<MetricTable> =
                    out.iter().map(|r| r.curves.iter().find(|(s, _)| *s == solver).expect("all solvers run").1.clone()).collect();
                let agg = aggregate(&tables)?;
                art.aggregate(format!("aggregate_{}.csv", solver.name()), &agg)?;
                aggregates.push((solver.name().to_owned(), agg));
            }
            Outcome::Qcqp(out)
        }
        Experiment::MetaTrain => {
            let results = per_seed(cfg, |seed| meta_seed(cfg, seed))?;
            let mut out = Vec::new();
            for (r, ms) in results {
                timing.push((r.seed, "meta-train", ms));
                art.table(format!("seed_{}_meta.csv", r.seed), &r.log)?;
                art.text(format!("seed_{}_phi.ckpt", r.seed), &r.optimizer.to_checkpoint())?;
                out.push(r);
            }
            let agg = aggregate(&out.iter().map(|r| r.log.clone()).collect::<Vec<_>>())?;
            art.aggregate("aggregate_meta.csv".into(), &agg)?;
            aggregates.push(("meta".to_owned(), agg));
            Outcome::MetaTrain(out)
        }
        Experiment::NavTrain => {
            let results = per_seed(cfg, |seed| nav_seed(cfg, seed, phi))?;
            let mut out = Vec::new();
            for (r, ms) in results {
                timing.push((r.seed, "nav-train", ms));
                art.table(format!("seed_{}_{FISAR}.csv", r.seed), &r.fisar)?;
                art.table(format!("seed_{}_{PROJECTED_PG}.csv", r.seed), &r.baseline)?;
                out.push(r);
            }
            for (name, pick) in [(FISAR, true), (PROJECTED_PG, false)] {
                let tables: Vec<MetricTable> =
                    out.iter().map(|r| if pick { r.fisar.clone() } else { r.baseline.clone() }).collect();
                let agg = aggregate(&tables)?;
                art.aggregate(format!("aggregate_{name}.csv"), &agg)?;
                aggregates.push((name.to_owned(), agg));
            }
            Outcome::NavTrain(out)
        }
    };

    write_timing(&dir.join(TIMING_FILE), &timing)?;
    art.files.sort();
    write_manifest(cfg, &art, checkpoint.map(|(_, h)| h))?;
    Ok(RunReport { output_dir: dir, metric_files: art.files, aggregates, outcome })
}

/// Runs `job` for every seed on up to `cfg.workers` threads. Results come
/// back in seed-list order with their wall time in milliseconds.
fn per_seed<T: Send>(cfg: &ExperimentConfig, job: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<(T, u128)>> {
    let timed = |seed: u64| {
        let start = Instant::now();
        job(seed).map(|r| (r, start.elapsed().as_millis()))
    };
    let mut out = Vec::with_capacity(cfg.seeds.len());
    for chunk in cfg.seeds.chunks(cfg.workers) {
        let results: Vec<Result<(T, u128)>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&seed| s.spawn(move || timed(seed))).collect();
            handles.into_iter().map(|h| h.join().expect("seed worker panicked")).collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

fn kappa(cfg: &ExperimentConfig) -> Result<KappaFn> {
    Ok(KappaFn::new(cfg.kappa_slope)?)
}

/// Trains a fresh optimizer on `sampler` from stream [`STREAM_META`].
fn train_phi<S: TaskSampler>(
    cfg: &ExperimentConfig,
    seed: u64,
    sampler: &mut S,
) -> Result<(RecurrentOptimizer, Vec<OuterStepLog>)> {
    let mut rng = SeededRng::with_stream(seed, STREAM_META);
    let opt = RecurrentOptimizer::new(cfg.cell, &mut rng)?;
    Ok(train_meta(opt, sampler, &cfg.unroll, kappa(cfg)?, cfg.meta.outer_steps, &mut rng)?)
}

fn qcqp_sampler(cfg: &ExperimentConfig) -> QcqpTaskSampler {
    QcqpTaskSampler { generator: cfg.qcqp.generator.clone() }
}

fn nav_sampler(cfg: &ExperimentConfig) -> NavTaskSampler {
    NavTaskSampler { env: cfg.nav.clone(), settings: cfg.policy.clone() }
}

fn benchmark_config(cfg: &ExperimentConfig) -> BenchmarkConfig {
    BenchmarkConfig {
        steps: cfg.qcqp.steps,
        beta: cfg.unroll.beta,
        delta: cfg.unroll.delta,
        kappa_slope: cfg.kappa_slope,
        adam_lr: cfg.baselines.adam_lr,
        rmsprop_lr: cfg.baselines.rmsprop_lr,
        sgd_lr: cfg.baselines.sgd_lr,
    }
}

fn qcqp_seed(cfg: &ExperimentConfig, seed: u64, phi: Option<&RecurrentOptimizer>) -> Result<QcqpSeedResult> {
    let trained;
    let opt = match phi {
        Some(o) => o,
        None => {
            trained = train_phi(cfg, seed, &mut qcqp_sampler(cfg))?.0;
            &trained
        }
    };
    let bench = benchmark_config(cfg);
    bench.validate()?;
    let gen = &cfg.qcqp.generator;
    let mut finals = Vec::new();
    let mut sums: Vec<Vec<(f64, f64)>> = vec![vec![(0.0, 0.0); bench.steps + 1]; QcqpSolver::ALL.len()];

    let mut rng = SeededRng::with_stream(seed, STREAM_HELD_OUT);
    for i in 0..cfg.qcqp.held_out {
        let task = gen.infeasible_task(&mut rng);
        let curves = run_qcqp_benchmark(&task, &QcqpSolver::ALL, Some(opt), &bench)?;
        for (s, c) in curves.iter().enumerate() {
            for (acc, p) in sums[s].iter_mut().zip(&c.points) {
                acc.0 += p.objective;
                acc.1 += p.violation;
            }
        }
        finals.extend(curves.iter().map(|c| instance_final(i, KIND_INFEASIBLE_START, c)));
    }
    let mut rng = SeededRng::with_stream(seed, STREAM_FEASIBLE_OPTIMUM);
    for i in 0..cfg.qcqp.feasible_optimum {
        let task = gen.feasible_optimum_task(&mut rng);
        let curves = run_qcqp_benchmark(&task, &QcqpSolver::ALL, Some(opt), &bench)?;
        finals.extend(curves.iter().map(|c| instance_final(i, KIND_FEASIBLE_OPTIMUM, c)));
    }

    let n = cfg.qcqp.held_out as f64;
    let curves = QcqpSolver::ALL
        .iter()
        .zip(&sums)
        .map(|(solver, s)| {
            let mut t = MetricTable::new(vec!["objective".into(), "violation".into()]);
            for (k, (j, v)) in s.iter().enumerate() {
                t.push(k, vec![j / n, v / n]);
            }
            (*solver, t)
        })
        .collect();
    Ok(QcqpSeedResult { seed, curves, finals })
}

fn instance_final(instance: usize, kind: &'static str, c: &SolverCurve) -> InstanceFinal {
    InstanceFinal {
        instance,
        kind,
        solver: c.solver,
        initial_objective: c.points[0].objective,
        final_objective: c.last().objective,
        final_violation: c.last().violation,
    }
}

fn finals_csv(finals: &[InstanceFinal]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["instance", "kind", "solver", "initial_objective", "final_objective", "final_violation"])
        .expect("in-memory write");
    for f in finals {
        w.write_record([
            f.instance.to_string(),
            f.kind.to_owned(),
            f.solver.name().to_owned(),
            fmt_real(f.initial_objective),
            fmt_real(f.final_objective),
            fmt_real(f.final_violation),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii csv")
}

/// Columns of the meta-training log; `skipped` is 1 for a non-finite step.
pub fn meta_log_table(logs: &[OuterStepLog]) -> MetricTable {
    let mut t = MetricTable::new(
        ["loss", "initial_violation", "final_violation", "final_objective", "max_polytope_residual", "skipped"]
            .map(String::from)
            .to_vec(),
    );
    for l in logs {
        let skipped = if l.skipped { 1.0 } else { 0.0 };
        t.push(l.step, vec![l.loss, l.initial_violation, l.final_violation, l.final_objective, l.max_polytope_residual, skipped]);
    }
    t
}

fn meta_seed(cfg: &ExperimentConfig, seed: u64) -> Result<MetaSeedResult> {
    let (optimizer, logs) = match cfg.meta.task {
        MetaTask::Qcqp => train_phi(cfg, seed, &mut qcqp_sampler(cfg))?,
        MetaTask::Nav => train_phi(cfg, seed, &mut nav_sampler(cfg))?,
    };
    Ok(MetaSeedResult { seed, log: meta_log_table(&logs), optimizer })
}

fn nav_seed(cfg: &ExperimentConfig, seed: u64, phi: Option<&RecurrentOptimizer>) -> Result<NavSeedResult> {
    let trained;
    let opt = match phi {
        Some(o) => o,
        None => {
            trained = train_phi(cfg, seed, &mut nav_sampler(cfg))?.0;
            &trained
        }
    };
    let init = GaussianMlpPolicy::new(cfg.policy.hidden, &mut SeededRng::with_stream(seed, STREAM_POLICY_INIT))?;
    let update = UpdateSettings { beta: cfg.unroll.beta, delta: cfg.unroll.delta, kappa: kappa(cfg)? };
    let iters = cfg.nav_train.iterations;
    let channels = cfg.nav.channels();
    let f = run_fisar(opt, &cfg.nav, &cfg.policy, &init, iters, update, SeededRng::with_stream(seed, STREAM_FISAR_ROLLOUTS))?;
    let b = run_projected_pg(
        &cfg.nav,
        &cfg.policy,
        &init,
        iters,
        cfg.baselines.policy_lr,
        update,
        SeededRng::with_stream(seed, STREAM_BASELINE_ROLLOUTS),
    )?;
    Ok(NavSeedResult { seed, fisar: records_table(&f, channels), baseline: records_table(&b, channels) })
}

#[derive(Serialize)]
struct TimingRow<'a> {
    seed: u64,
    phase: &'a str,
    wall_ms: u128,
}

fn write_timing(path: &Path, rows: &[(u64, &str, u128)]) -> Result<()> {
    let rows: Vec<TimingRow> = rows.iter().map(|&(seed, phase, wall_ms)| TimingRow { seed, phase, wall_ms }).collect();
    let text = serde_json::to_string_pretty(&rows).expect("timing serializes");
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

fn write_manifest(cfg: &ExperimentConfig, art: &Artifacts, checkpoint_sha256: Option<String>) -> Result<()> {
    let files = art
        .files
        .iter()
        .map(|name| {
            let path = art.path(name);
            let bytes = std::fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
            Ok(ManifestFile { name: name.clone(), sha256: hex_digest(&bytes) })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        experiment: cfg.experiment.name(),
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: cfg.hash(),
        seeds: &cfg.seeds,
        checkpoint_sha256,
        files,
        config: cfg.to_toml(),
    };
    let path = art.path(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| HarnessError::io(path, e))
}
