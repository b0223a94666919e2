use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fisar_harness::{aggregate, run_experiment, Experiment, ExperimentConfig, HarnessError, MetricTable, Overrides};

#[derive(Parser)]
#[command(name = "fisar", version, about = "Runs the constrained-optimization and safe-RL benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// QCQP benchmark: learned optimizer against Adam, RMSProp, SGD and the projected gradient.
    Qcqp(RunArgs),
    /// Meta-train the recurrent optimizer and write its checkpoint.
    MetaTrain(RunArgs),
    /// Navigation policy optimization with the learned optimizer and the projected gradient.
    NavTrain(RunArgs),
    /// Aggregate metric CSVs into mean and 95% interval columns.
    Aggregate {
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, relative to the output root when relative.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Main-loop iterations (benchmark steps, outer steps or policy updates).
    #[arg(long)]
    steps: Option<usize>,
}

fn load(experiment: Experiment, args: &RunArgs) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.experiment = experiment;
    cfg.apply(&Overrides { seed: args.seed, out: args.out.clone(), steps: args.steps })?;
    Ok(cfg)
}

fn run(experiment: Experiment, args: &RunArgs) -> Result<(), HarnessError> {
    let cfg = load(experiment, args)?;
    let report = run_experiment(&cfg)?;
    println!("{}: wrote {} files to {}", experiment.name(), report.metric_files.len(), report.output_dir.display());
    Ok(())
}

fn aggregate_files(out: &Path, inputs: &[PathBuf]) -> Result<(), HarnessError> {
    let tables = inputs.iter().map(|p| MetricTable::load(p)).collect::<Result<Vec<_>, _>>()?;
    let agg = aggregate(&tables)?;
    agg.save(out)?;
    if agg.degenerate {
        eprintln!("warning: {} input file(s); the interval is degenerate", agg.inputs);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Qcqp(a) => run(Experiment::Qcqp, a),
        Command::MetaTrain(a) => run(Experiment::MetaTrain, a),
        Command::NavTrain(a) => run(Experiment::NavTrain, a),
        Command::Aggregate { out, inputs } => aggregate_files(out, inputs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                HarnessError::ConfigInvalid { .. } => 2,
                _ => 1,
            })
        }
    }
}
