//! `stvar`: command-line front end for weighted-lasso spatio-temporal VAR
//! estimation, simulation studies and detrending.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod context;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stvar_core::weights::UnreachablePolicy;
use stvar_core::WeightKind;
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "stvar", version, about = "Weighted l1 estimation of spatio-temporal VAR models")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Directory receiving all output files.
    #[arg(long, short = 'o', global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Master seed for stochastic commands.
    #[arg(long, global = true, env = "STVAR_SEED")]
    seed: Option<u64>,
    /// Caps the worker threads used for parallel work.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulates a panel from a VAR model JSON.
    Simulate(SimulateArgs),
    /// Draws a lattice truth model and geometry for a simulation scenario.
    GenerateScenario(ScenarioArgs),
    /// Fits the weighted lasso at one penalty level.
    Fit(FitArgs),
    /// Selects order, weight constant and penalty by forward cross-validation.
    Cv(CvArgs),
    /// Recursive multi-step forecasts from a fitted model.
    Forecast(ForecastArgs),
    /// Compares a fit to the truth and/or runs Diebold-Mariano tests.
    Evaluate(EvaluateArgs),
    /// Runs a Monte-Carlo study from a TOML config.
    Study(StudyArgs),
    /// Fits periodic trends and variance links, standardizing a panel.
    Detrend(DetrendArgs),
    /// Classifies the estimated Granger network against the truth.
    Network(NetworkArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// VAR model JSON (`p`, `m`, `phis`, `sigma`).
    #[arg(long)]
    model: PathBuf,
    /// Number of time points to keep.
    #[arg(long)]
    length: usize,
    #[arg(long, default_value_t = stvar_core::model::DEFAULT_BURN_IN)]
    burn_in: usize,
    /// Geometry CSV whose site ids label the panel columns.
    #[arg(long)]
    geometry: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// TOML file with scenario fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    setting: Option<u8>,
    /// Sparsity scenario: a, b or c.
    #[arg(long)]
    scenario: Option<String>,
    /// Number of sites.
    #[arg(long)]
    sites: Option<usize>,
    #[arg(long)]
    sigma_scale: Option<f64>,
    /// Also simulate a panel of this many time points.
    #[arg(long)]
    length: Option<usize>,
    #[arg(long, default_value_t = stvar_core::model::DEFAULT_BURN_IN)]
    burn_in: usize,
}

#[derive(Debug, Args, Clone)]
struct GeometryArgs {
    /// Site coordinates CSV (`site_id,x,y`).
    #[arg(long)]
    geometry: Option<PathBuf>,
    /// Distance matrix CSV overriding Euclidean distances.
    #[arg(long, requires = "geometry")]
    distances: Option<PathBuf>,
    /// Treatment of `inf` distances.
    #[arg(long, value_enum, default_value_t = Unreachable::ClampToMax)]
    unreachable: Unreachable,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Unreachable {
    ClampToMax,
    InfiniteWeight,
}

impl From<Unreachable> for UnreachablePolicy {
    fn from(u: Unreachable) -> Self {
        match u {
            Unreachable::ClampToMax => UnreachablePolicy::ClampToMax,
            Unreachable::InfiniteWeight => UnreachablePolicy::InfiniteWeight,
        }
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Panel CSV.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    geometry: GeometryArgs,
    /// Weight function name.
    #[arg(long, default_value = "exp-lag-dist", value_parser = parse_kind)]
    weights: WeightKind,
    /// Weight constant; 0 gives the unweighted lasso.
    #[arg(long, default_value_t = 0.0)]
    c: f64,
    /// Lag order.
    #[arg(long)]
    order: usize,
    /// Penalty level.
    #[arg(long, conflicts_with = "lambda_index")]
    lambda: Option<f64>,
    /// 1-based index into the decreasing penalty grid.
    #[arg(long)]
    lambda_index: Option<usize>,
    #[arg(long, default_value_t = stvar_core::solver::DEFAULT_GRID_COUNT)]
    lambda_count: usize,
    #[arg(long, default_value_t = stvar_core::solver::DEFAULT_GRID_RATIO)]
    lambda_ratio: f64,
    /// Zero estimates whose magnitude does not exceed this level.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    geometry: GeometryArgs,
    /// TOML file with cross-validation plan fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    weights: Option<WeightKind>,
    /// Comma-separated weight constants.
    #[arg(long, value_delimiter = ',')]
    c: Option<Vec<f64>>,
    /// Comma-separated lag orders.
    #[arg(long, value_delimiter = ',')]
    orders: Option<Vec<usize>>,
    /// Number of training rows.
    #[arg(long)]
    train_end: Option<usize>,
    #[arg(long)]
    lambda_count: Option<usize>,
    #[arg(long)]
    lambda_ratio: Option<f64>,
}

#[derive(Debug, Args)]
struct ForecastArgs {
    #[arg(long)]
    input: PathBuf,
    /// Fit JSON written by `fit` or `cv`.
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    horizon: usize,
    /// Trend JSON from `detrend`; forecasts are mapped back to the data scale.
    #[arg(long)]
    trend: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long, requires = "truth")]
    fit: Option<PathBuf>,
    /// Truth VAR model JSON.
    #[arg(long, requires = "fit")]
    truth: Option<PathBuf>,
    /// Forecast errors of the first method (panel CSV).
    #[arg(long, requires = "errors_b")]
    errors_a: Option<PathBuf>,
    #[arg(long, requires = "errors_a")]
    errors_b: Option<PathBuf>,
    /// Forecast horizon of the compared errors.
    #[arg(long, default_value_t = 1)]
    horizon: usize,
}

#[derive(Debug, Args)]
struct StudyArgs {
    /// Study TOML config.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Args)]
struct DetrendArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = stvar_core::detrend::DEFAULT_PERIOD)]
    period: usize,
    /// Kernel bandwidth in slots; a rule of thumb is used when absent.
    #[arg(long)]
    bandwidth: Option<f64>,
    /// TOML slot filter (`ranges = [[start, end], ...]`).
    #[arg(long)]
    slots: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct NetworkArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// One edge per site pair, connected when any lag is nonzero.
    #[arg(long)]
    collapse: bool,
}

fn parse_kind(s: &str) -> Result<WeightKind, String> {
    s.parse().map_err(|e: stvar_core::Error| e.to_string())
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] stvar_core::Error),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_data_error() => 2,
            CliError::Core(_) | CliError::Numerical(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let g = &cli.global;
    match &cli.command {
        Command::Simulate(a) => commands::simulate(g, a),
        Command::GenerateScenario(a) => commands::generate_scenario(g, a),
        Command::Fit(a) => commands::fit(g, a),
        Command::Cv(a) => commands::cv(g, a),
        Command::Forecast(a) => commands::forecast(g, a),
        Command::Evaluate(a) => commands::evaluate(g, a),
        Command::Study(a) => commands::study(g, a),
        Command::Detrend(a) => commands::detrend(g, a),
        Command::Network(a) => commands::network(g, a),
    }
}
