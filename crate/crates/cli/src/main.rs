//! `crmkit`: simulate logs, train policies, evaluate them and run comparisons.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "crmkit",
    version,
    about = "Counterfactual learning from logged bandit feedback"
)]
struct Cli {
    /// Seed selecting the simulated user population.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON file overriding defaults (SimConfig, or ObjectiveConfig for `train`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file, or output directory for `compare` and `sweep`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate an interaction log under a logging policy.
    Simulate(SimulateArgs),
    /// Fit a policy on a logged dataset.
    Train(TrainArgs),
    /// A/B-test a policy in the simulator or estimate its CTR off-policy.
    Evaluate(EvaluateArgs),
    /// Run the experiment grid and write results.csv and results.svg.
    Compare(CompareArgs),
    /// Run the grid once per value of one hyper-parameter.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LoggingKind {
    Popularity,
    Uniform,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    users: u64,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long, value_enum, default_value_t = LoggingKind::Popularity)]
    policy: LoggingKind,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    log: PathBuf,
    /// likelihood, ips-likelihood, cb, dual, poem or snips.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("mode").required(true).args(["ab", "off_policy"])))]
struct EvaluateArgs {
    #[arg(long)]
    policy: PathBuf,
    /// Deploy the policy on fresh simulated users.
    #[arg(long)]
    ab: bool,
    /// Estimate the policy's CTR from a logged dataset.
    #[arg(long)]
    off_policy: bool,
    #[arg(long, default_value_t = 30_000)]
    users: u64,
    #[arg(long, required_if_eq("off_policy", "true"))]
    log: Option<PathBuf>,
    /// ips or snips.
    #[arg(long, default_value = "ips")]
    estimator: String,
    /// Weight cap for the ips estimator.
    #[arg(long)]
    clip: Option<f64>,
    /// Bootstrap resamples for the snips interval.
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// ExperimentSpec JSON; defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepParam {
    Alpha,
    Lambda,
    Clip,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(CliError::invalid)?;
    }
    let global = commands::Global {
        seed: cli.seed,
        config: cli.config,
        out: cli.out,
    };
    match cli.command {
        Command::Simulate(a) => commands::simulate(&global, a),
        Command::Train(a) => commands::train(&global, a),
        Command::Evaluate(a) => commands::evaluate(&global, a),
        Command::Compare(a) => commands::compare(&global, a),
        Command::Sweep(a) => commands::sweep(&global, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("crmkit: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
