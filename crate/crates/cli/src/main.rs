mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use serde::Serialize;

const EXIT_CODES: &str = "Exit codes:
  0  success
  1  numerical or internal failure
  2  data error (missing file, malformed panel, bad period)
  3  solver did not converge
  4  usage or configuration error";

#[derive(Debug, Parser)]
#[command(name = "synthpi", version, about = "Synthetic control predictions with prediction intervals", after_help = EXIT_CODES)]
pub struct Cli {
    /// Flat key=value file; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Base seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Print the effective configuration as key=value lines and exit.
    #[arg(long, global = true)]
    pub config_dump: bool,

    /// Log to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Estimate synthetic control weights.
    Fit(FitArgs),
    /// Prediction intervals for every post-treatment period.
    Pi(PiArgs),
    /// Monte Carlo coverage table.
    Mc(McArgs),
    /// Solve one QCLP problem given as JSON (debugging aid).
    QclpSolve(QclpArgs),
    /// Write a simulated panel as long CSV.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, clap::Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct DataArgs {
    /// Panel CSV.
    #[arg(long)]
    pub input: PathBuf,
    /// `long` (unit, period, feature, value) or `wide` (one column per feature).
    #[arg(long, default_value = "long")]
    pub format: String,
    #[arg(long)]
    pub treated: String,
    /// First post-treatment period.
    #[arg(long)]
    pub post_start: i64,
    /// Features to match on; the first is the outcome. Defaults to all.
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<String>,
    /// Add a per-feature intercept.
    #[arg(long)]
    pub intercept: bool,
    /// e.g. `simplex`, `l1 Q=1`, `simplex-l2 Q=0.6`, `unconstrained`.
    #[arg(long, default_value = "simplex")]
    pub constraint: String,
    /// `iid`, `weakly_dependent` or `cointegration`.
    #[arg(long, default_value = "iid")]
    pub regime: String,
    /// Standardize each feature block by its pooled pre-period sd.
    #[arg(long)]
    pub standardize: bool,
    #[arg(long, default_value = "unit")]
    pub unit_col: String,
    #[arg(long, default_value = "period")]
    pub period_col: String,
    #[arg(long, default_value = "feature")]
    pub feature_col: String,
    #[arg(long, default_value = "value")]
    pub value_col: String,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct FitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Output JSON (stdout if omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct PiArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0.05)]
    pub alpha1: f64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha2: f64,
    /// Out-of-sample approaches: subg, locscale, qreg, poly:k.
    #[arg(long, value_delimiter = ',', default_value = "subg,locscale,qreg")]
    pub approaches: Vec<String>,
    /// Simulation draws for the in-sample bounds.
    #[arg(long, default_value_t = 1000)]
    pub draws: usize,
    /// plugin_diag, hc_iid, long_run[:bandwidth] or cointegration_plugin.
    #[arg(long, default_value = "plugin_diag")]
    pub sigma: String,
    /// Relaxation threshold: `auto` or a number.
    #[arg(long, default_value = "auto")]
    pub rho: String,
    /// Degree of the residual mean/variance/quantile regressions.
    #[arg(long, default_value_t = 1)]
    pub mean_degree: usize,
    /// Scale on the estimated conditional sd in the subgaussian bound.
    #[arg(long, default_value_t = 1.0)]
    pub sd_factor: f64,
    /// Add subgaussian bounds over a grid of sd multipliers.
    #[arg(long)]
    pub sensitivity: bool,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1,1.5,2")]
    pub sensitivity_factors: Vec<f64>,
    /// Full results as JSON (stdout if neither output is given).
    #[arg(long)]
    pub out_json: Option<PathBuf>,
    /// One row per interval.
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct McArgs {
    /// AR(1) coefficient of the donors, in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    /// Use the misspecified error process.
    #[arg(long)]
    pub misspec: bool,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    /// M1, M1-S, M2, M3, oracle, infinite.
    #[arg(long, value_delimiter = ',', default_value = "M1,M1-S,M2,M3")]
    pub methods: Vec<String>,
    /// `fixed` (conditional on one donor draw) or `redrawn`.
    #[arg(long, default_value = "fixed")]
    pub mode: String,
    #[arg(long, default_value_t = 1000)]
    pub draws: usize,
    #[arg(long, default_value_t = 100)]
    pub t0: usize,
    #[arg(long, default_value_t = 1)]
    pub mean_degree: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha1: f64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha2: f64,
    /// Output CSV (stdout if omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct QclpArgs {
    /// Problem JSON.
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    /// Use the bisection reference solver.
    #[arg(long)]
    pub bisection: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    #[arg(long)]
    pub misspec: bool,
    #[arg(long, default_value_t = 100)]
    pub t0: usize,
    #[arg(long, default_value_t = 1)]
    pub t1: usize,
    /// Added to the treated outcome in every post period.
    #[arg(long, default_value_t = 0.0)]
    pub effect: f64,
    /// Panel CSV (stdout if omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Simulation truth as JSON.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

/// Error carrying its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }
}

impl From<synthpi_core::Error> for CliError {
    fn from(e: synthpi_core::Error) -> Self {
        Self { code: e.exit_code() as u8, message: e.to_string() }
    }
}

fn effective_config(cli: &Cli) -> serde_json::Value {
    let mut v = match &cli.command {
        Cmd::Fit(a) => serde_json::to_value(a),
        Cmd::Pi(a) => serde_json::to_value(a),
        Cmd::Mc(a) => serde_json::to_value(a),
        Cmd::QclpSolve(a) => serde_json::to_value(a),
        Cmd::Simulate(a) => serde_json::to_value(a),
    }
    .unwrap_or(serde_json::Value::Null);
    if let serde_json::Value::Object(map) = &mut v {
        map.insert("seed".into(), cli.seed.into());
        if let Some(t) = cli.threads {
            map.insert("threads".into(), t.into());
        }
    }
    v
}

fn run(args: Vec<OsString>) -> Result<(), CliError> {
    let args = config::expand(args, &Cli::command()).map_err(|e| CliError::usage(e.0))?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return Err(CliError { code, message: String::new() });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    if cli.config_dump {
        print!("{}", config::dump(&effective_config(&cli)));
        return Ok(());
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError { code: 1, message: e.to_string() })?;
    }
    match &cli.command {
        Cmd::Fit(a) => commands::fit(a),
        Cmd::Pi(a) => commands::pi(a, cli.seed),
        Cmd::Mc(a) => commands::mc(a, cli.seed),
        Cmd::QclpSolve(a) => commands::qclp_solve(a),
        Cmd::Simulate(a) => commands::simulate(a, cli.seed),
    }
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !e.message.is_empty() {
                eprintln!("error: {}", e.message);
            }
            ExitCode::from(e.code)
        }
    }
}
