mod commands;
mod config;
mod logging;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use log::LevelFilter;
use stgraph::graph::GraphMode;
use stgraph::models::Arch;
use stgraph::training::Split;
use stgraph::{par, ErrorCategory};

use crate::config::PipelineConfig;
use crate::output::Outputs;

/// Spatio-temporal crash graphs: synthesize or ingest records, build fine
/// or hexagon-cell graphs, train and evaluate graph neural networks.
///
/// Settings come from an optional TOML file (`--config`); command-line
/// flags override it. Each command prints a one-line JSON summary on
/// stdout and logs JSON lines on stderr. On failure a JSON error object is
/// printed on stderr, any files written by the command are removed, and
/// the exit code is 2 (configuration), 3 (data) or 4 (numeric).
#[derive(Debug, Parser)]
#[command(name = "stgraph", version)]
pub struct Cli {
    /// Pipeline config file (TOML). Keys are listed under CONFIG KEYS in
    /// `--help`.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for data-parallel stages (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,

    /// Log level: off, error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: LevelFilter,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic crash record file.
    Synth(SynthArgs),
    /// Validate a record file and balance its classes.
    Ingest(IngestArgs),
    /// Build a fine (per-crash) or coarse (hexagon-cell) graph.
    BuildGraph(BuildArgs),
    /// Train one model; writes history.csv and checkpoint.json.
    Train(TrainArgs),
    /// Train every configuration of the hyperparameter grid.
    GridSearch(GridArgs),
    /// Best validation F1 of each architecture on fine and coarse graphs.
    Compare(CompareArgs),
    /// Metrics of a checkpoint on one split of a graph.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output record file (CSV).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the ground-truth sidecar (`id,component,injury_odds`).
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Number of records [synth.n_records, default 2352].
    #[arg(long)]
    pub n_records: Option<usize>,
    /// Generator seed [synth.seed, default 42].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Input record file (CSV).
    #[arg(long)]
    pub input: PathBuf,
    /// Output file with the validated, balanced records.
    #[arg(long)]
    pub out: PathBuf,
    /// Ingest report (JSON): row counts, rejected rows, class counts.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Keep both classes whole instead of undersampling the majority.
    #[arg(long)]
    pub no_balance: bool,
    /// Balancing seed [seed, default 42].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Input record file (CSV), normally the output of `ingest`.
    #[arg(long)]
    pub input: PathBuf,
    /// fine or coarse.
    #[arg(long)]
    pub mode: GraphMode,
    /// Output graph file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Embedding file [graph.embeddings, default: hashed narratives].
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Fine distance threshold, km [graph.dist_km, default 30].
    #[arg(long)]
    pub dist_km: Option<f64>,
    /// Fine time window, hours [graph.window_h, default 24].
    #[arg(long)]
    pub window_h: Option<f64>,
    /// Coarse hexagon resolution [graph.resolution, default 7].
    #[arg(long)]
    pub resolution: Option<u8>,
    /// Split seed [seed, default 42].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Clone, Copy)]
pub struct Hyper {
    /// Architecture: gcn, gat, sage, dstgcn [train.arch, default dstgcn].
    #[arg(long)]
    pub arch: Option<Arch>,
    /// Hidden width [train.hidden_dim, default 32].
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Dropout rate [train.dropout, default 0.3].
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Adam learning rate [train.lr, default 0.05].
    #[arg(long)]
    pub lr: Option<f64>,
    /// L2 weight decay [train.weight_decay, default 0.005].
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Epochs [train.epochs, default 30].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Master seed [seed, default 42].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Graph file.
    #[arg(long)]
    pub graph: PathBuf,
    /// Directory for history.csv and checkpoint.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Graph file.
    #[arg(long)]
    pub graph: PathBuf,
    /// Ranked results table (CSV).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the best run's checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Architecture [train.arch, default dstgcn].
    #[arg(long)]
    pub arch: Option<Arch>,
    /// Epochs per run [grid.epochs, default 30].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Master seed [seed, default 42].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Fine graph file. Without --fine and --coarse, both graphs are built
    /// from synthetic records generated with the [synth] settings.
    #[arg(long, requires = "coarse")]
    pub fine: Option<PathBuf>,
    /// Coarse graph file.
    #[arg(long, requires = "fine")]
    pub coarse: Option<PathBuf>,
    /// Comparison table (CSV).
    #[arg(long)]
    pub out: PathBuf,
    /// Architectures to compare [default: all].
    #[arg(long, value_delimiter = ',')]
    pub archs: Vec<Arch>,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Graph file.
    #[arg(long)]
    pub graph: PathBuf,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Directory for metrics.json, roc.csv and pr.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
    }
}

fn report_error(category: ErrorCategory, message: &str) -> ExitCode {
    let code = exit_code(category);
    let obj = serde_json::json!({
        "error": { "category": category.as_str(), "exit_code": code, "message": message }
    });
    eprintln!("{obj}");
    ExitCode::from(code)
}

fn parse_cli() -> Result<Cli, clap::Error> {
    let help = format!(
        "CONFIG KEYS (defaults shown; flags override the file):\n\n{}",
        PipelineConfig::default_toml()
    );
    let matches = Cli::command().after_long_help(help).try_get_matches()?;
    Cli::from_arg_matches(&matches)
}

fn main() -> ExitCode {
    let cli = match parse_cli() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report_error(ErrorCategory::Config, e.render().to_string().trim()),
    };
    logging::init(cli.log_level);
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path),
        None => Ok(PipelineConfig::default()),
    };
    let mut outputs = Outputs::default();
    let result =
        config.and_then(|config| par::with_workers(cli.workers, || commands::run(&cli.command, config, &mut outputs)));
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            outputs.rollback();
            report_error(e.category(), &e.to_string())
        }
    }
}
