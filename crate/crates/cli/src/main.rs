use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod error;

use error::CliError;

#[derive(Parser)]
#[command(name = "benchsynth", version, about = "Benchmark novelty/diversity analysis and coding-benchmark synthesis")]
struct Cli {
    /// Worker threads for parallel stages; defaults to available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve, verify, deduplicate and postprocess a new dataset.
    Generate(GenerateArgs),
    /// Novelty or diversity of datasets in a joint projection.
    Measure(MeasureArgs),
    /// Single-attempt pass/fail/error rates of a model on a passing dataset.
    Evaluate(EvaluateArgs),
    /// Re-measure over a grid of one estimator or projection parameter.
    Sweep(SweepArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Seed problems (JSONL of problem records, or see --import).
    #[arg(long)]
    pub seeds: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Read the seed file through an import adapter instead.
    #[arg(long, value_enum)]
    pub import: Option<ImportFormat>,
    /// Overrides the master seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where per-colony checkpoints go; defaults to <out>/checkpoints.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ImportFormat {
    Mbpp,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Novelty,
    Diversity,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    LinearPca,
    RandomProjection,
    ExternalReducer,
    PrecomputedImport,
}

/// Options shared by `measure` and `sweep`.
#[derive(Args)]
pub struct AnalysisArgs {
    /// Dataset files: problem-record JSONL, or embedding-matrix JSON (`.json`).
    #[arg(required = true)]
    pub datasets: Vec<PathBuf>,
    /// Pipeline config whose [embedding] section selects the embedder.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Read every JSONL dataset through an import adapter.
    #[arg(long, value_enum)]
    pub import: Option<ImportFormat>,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Projection target dimension.
    #[arg(long, default_value_t = 10)]
    pub dim: usize,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, default_value_t = 80)]
    pub n_neighbors: usize,
    #[arg(long, default_value_t = 0.1)]
    pub min_dist: f64,
    /// Diversity subsample size; defaults to min(150, smallest dataset).
    #[arg(long = "N")]
    pub subsample: Option<usize>,
    /// Diversity trials per projection run.
    #[arg(long = "T", default_value_t = 250)]
    pub trials: usize,
    #[arg(long, value_enum, default_value = "random-projection")]
    pub method: MethodArg,
    /// Reducer command for --method external-reducer, whitespace separated.
    #[arg(long)]
    pub reducer: Option<String>,
    /// Coordinates file for --method precomputed-import.
    #[arg(long)]
    pub coordinates: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the JSON report and CSV files.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct MeasureArgs {
    #[arg(value_enum)]
    pub metric: MetricArg,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    /// Novelty baseline; defaults to the first dataset.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Novelty of one dataset against itself: split it into two random halves.
    #[arg(long)]
    pub split_half: bool,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ParamArg {
    K,
    NNeighbors,
    MinDist,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub param: ParamArg,
    /// Comma-separated grid values, e.g. `2,4,8,16`.
    #[arg(long, default_value = "")]
    pub grid: String,
    #[arg(long, value_enum, default_value = "novelty")]
    pub metric: MetricArg,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Measure(a) => commands::measure(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Sweep(a) => commands::sweep(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(CliError::USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
