use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Least-squares identification of Markov parameters from multiple rollouts.
///
/// Exit codes: 0 success, 2 configuration error, 3 simulation failure,
/// 4 numerical failure in an estimator, 5 experiment with a wholly invalid sweep point.
#[derive(Debug, Parser)]
#[command(name = "markovid", version, about, long_about)]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true, env = "MARKOVID_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate rollouts and write them as CSV plus a JSON manifest.
    Simulate(SimulateArgs),
    /// Estimate the input Markov parameters from a dataset or a fresh simulation.
    Estimate(EstimateArgs),
    /// Evaluate the finite-sample bound constants.
    Bounds(BoundsArgs),
    /// Run a Monte Carlo experiment from a JSON config.
    Benchmark(BenchmarkArgs),
    /// Recover open-loop noise Markov parameters from predictor-form ones.
    Extract(ExtractArgs),
}

#[derive(Debug, Args, Clone)]
pub struct SimArgs {
    /// Preset name (siso-paper, mimo-paper) or path to a system JSON file.
    #[arg(long, default_value = "siso-paper")]
    pub system: String,
    /// Number of rollouts N.
    #[arg(long = "n", default_value_t = 200)]
    pub n: usize,
    /// Rollout length T.
    #[arg(long = "t", default_value_t = 10)]
    pub t: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_u: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_e: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    /// Output directory.
    #[arg(long, env = "MARKOVID_OUT_DIR", default_value = "markovid-out")]
    pub out: PathBuf,
    /// Leave the innovation columns out of the CSV.
    #[arg(long)]
    pub no_innovations: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorChoice {
    Ols,
    WlsOptimal,
    WlsEstimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExtractionChoice {
    Recursive,
    HoKalman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeChoice {
    Strict,
    #[value(name = "paper-literal")]
    FullLag,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Dataset manifest written by `simulate`. Without it a dataset is simulated.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub sim: SimArgs,
    #[arg(long, value_enum, default_value = "ols")]
    pub method: EstimatorChoice,
    #[arg(long, value_enum, default_value = "strict")]
    pub predictor_mode: ModeChoice,
    #[arg(long, value_enum, default_value = "recursive")]
    pub extraction: ExtractionChoice,
    /// State dimension for Ho-Kalman extraction (defaults to the system's).
    #[arg(long)]
    pub nx: Option<usize>,
    /// Output directory for the JSON report.
    #[arg(long, env = "MARKOVID_OUT_DIR", default_value = "markovid-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[arg(long, default_value_t = 1)]
    pub nu: usize,
    #[arg(long, default_value_t = 1)]
    pub ny: usize,
    #[arg(long = "t", default_value_t = 10)]
    pub t: usize,
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    pub delta: f64,
    /// Spectral norm of H; computed from --system when omitted.
    #[arg(long)]
    pub h_norm: Option<f64>,
    /// System used for ||H|| when --h-norm is omitted.
    #[arg(long, default_value = "siso-paper")]
    pub system: String,
    #[arg(long = "n", default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_u: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_e: f64,
    /// Also write the report as JSON into this directory.
    #[arg(long, env = "MARKOVID_OUT_DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Override trials per sweep point.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Keep only the first K sweep points.
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the estimator set (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub estimators: Option<Vec<String>>,
    #[arg(long, value_enum)]
    pub predictor_mode: Option<ModeChoice>,
    #[arg(long)]
    pub sigma_u: Option<f64>,
    #[arg(long)]
    pub sigma_e: Option<f64>,
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long, env = "MARKOVID_OUT_DIR", default_value = "markovid-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Dataset manifest; predictor parameters are then estimated by least squares.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// System whose exact predictor parameters are used when --in is omitted.
    #[arg(long, default_value = "siso-paper")]
    pub system: String,
    /// Number of predictor blocks available (T - 1 for a dataset of horizon T).
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, value_enum, default_value = "recursive")]
    pub method: ExtractionChoice,
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long, value_enum, default_value = "strict")]
    pub predictor_mode: ModeChoice,
    #[arg(long, env = "MARKOVID_OUT_DIR", default_value = "markovid-out")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set thread count: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
