mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use ays_core::solvers::SolverKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Invalid flags or inputs; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "ays", version, about = "Sampling-schedule optimization for diffusion samplers on analytic models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a heuristic or Gaussian-optimal schedule.
    Schedule(ScheduleArgs),
    /// Optimize 10/20/40-step schedules for a model.
    Optimize(OptimizeArgs),
    /// Run a sampler and dump its output.
    Sample(SampleArgs),
    /// Evaluate samples or schedules.
    Eval(EvalArgs),
    /// NLL table over solvers x schedules x NFE, plus 2-D histograms.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Edm,
    Logsnr,
    TimeUniform,
    TimeQuadratic,
    GaussianOptimal,
    GaussianKlubOptimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spacing {
    Index,
    Time,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct NoiseArgs {
    #[arg(long, default_value_t = 0.002)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = 80.0)]
    pub sigma_max: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScheduleArgs {
    #[arg(long, value_enum)]
    pub kind: ScheduleKind,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: u64,
    #[arg(long, default_value_t = 7.0)]
    pub rho: f64,
    /// Spacing of the time-quadratic kind.
    #[arg(long, value_enum, default_value_t = Spacing::Index)]
    pub spacing: Spacing,
    /// Data standard deviation for the Gaussian-optimal kinds.
    #[arg(long)]
    pub c: Option<f64>,
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_solver(s: &str) -> Result<SolverKind, String> {
    s.parse::<SolverKind>().map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimizeArgs {
    /// Model config JSON.
    #[arg(long)]
    pub model: PathBuf,
    /// Optimizer config JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub n_mc: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub n_candidates: Option<usize>,
    #[arg(long)]
    pub span: Option<f64>,
    #[arg(long)]
    pub max_sweeps: Option<usize>,
    #[arg(long)]
    pub refine_sweeps: Option<usize>,
    #[arg(long)]
    pub monitor_every: Option<usize>,
    #[arg(long)]
    pub monitor_samples: Option<usize>,
    /// Visit indices one at a time instead of odd/even phases.
    #[arg(long)]
    pub serial: bool,
    /// Skip early stopping in the first stage.
    #[arg(long)]
    pub no_monitor: bool,
    /// Solver whose output NLL is monitored on mixture models.
    #[arg(long, value_parser = parse_solver, default_value = "sde-dpmpp-2m")]
    pub monitor_solver: SolverKind,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(2..))]
    pub steps: u64,
    /// Number of subdivide-and-refine stages after the first.
    #[arg(long, default_value_t = 2)]
    pub refinements: usize,
    /// EDM rho of the initial schedule.
    #[arg(long, default_value_t = 7.0)]
    pub init_rho: f64,
    #[command(flatten)]
    pub noise: NoiseArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleFormat {
    Csv,
    Bin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    Isotropic,
    Marginal,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_parser = parse_solver)]
    pub solver: SolverKind,
    #[arg(long)]
    pub schedule: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SampleFormat::Csv)]
    pub format: SampleFormat,
    #[arg(long, value_enum, default_value_t = PriorKind::Isotropic)]
    pub prior: PriorKind,
    /// Compare the empirical output variance with the Euler product formula
    /// (Gaussian model and DDIM only).
    #[arg(long)]
    pub check_variance: bool,
    /// Per-step CSV of mean |x| and mean |D|.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Nll,
    GaussianEulerKl,
    Klub,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum)]
    pub metric: Metric,
    /// Sample file (CSV or .bin) for `nll`.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Schedule files for `gaussian-euler-kl` and `klub`; repeatable.
    #[arg(long)]
    pub schedule: Vec<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub n_mc: usize,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompareMetric {
    Nll,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated solver tags.
    #[arg(long, value_delimiter = ',', value_parser = parse_solver, required = true)]
    pub solvers: Vec<SolverKind>,
    /// Comma-separated schedules: a heuristic name (edm, edm:RHO, logsnr,
    /// time-uniform, time-quadratic-index, time-quadratic-time), a schedule
    /// file, or an `optimize` output directory.
    #[arg(long, value_delimiter = ',', required = true)]
    pub schedules: Vec<String>,
    #[arg(long, value_delimiter = ',', required = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub nfe: Vec<u64>,
    #[arg(long, default_value_t = 100_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = CompareMetric::Nll)]
    pub metric: CompareMetric,
    /// Write a 50x50 histogram per cell.
    #[arg(long)]
    pub histograms: bool,
    #[command(flatten)]
    pub noise: NoiseArgs,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<serde_json::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<ays_core::Error>() {
            return match e {
                ays_core::Error::Json(_) => 2,
                e if e.is_validation() => 2,
                _ => 1,
            };
        }
    }
    1
}

fn configure_workers() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("AYS_WORKERS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| usage(format!("AYS_WORKERS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_workers().and_then(|()| match cli.command {
        Command::Schedule(a) => commands::schedule(a),
        Command::Optimize(a) => commands::optimize(a),
        Command::Sample(a) => commands::sample(a),
        Command::Eval(a) => commands::eval(a),
        Command::Compare(a) => commands::compare(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
