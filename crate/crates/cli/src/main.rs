//! `mpgat`: synthesize data, prepare samples, train, evaluate, compare runs,
//! forecast and export plot tables.

mod commands;
mod rundir;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mpgat_core::MpgatError;

use settings::Settings;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Default output root when neither --out nor the config file sets one.
pub const OUT_ENV: &str = "MPGAT_OUT";

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_VALIDATION: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl From<MpgatError> for Failure {
    fn from(e: MpgatError) -> Self {
        match e {
            MpgatError::Dimension(_)
            | MpgatError::Contract(_)
            | MpgatError::GraphLoad(_)
            | MpgatError::Data(_)
            | MpgatError::Config(_)
            | MpgatError::Checkpoint(_) => Failure::Validation(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Validation(_) => EXIT_VALIDATION,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mpgat", version, about = "Spatial-temporal traffic forecasting with MPGAT")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Shared {
    /// Flat `key = value` file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset CSV (timestamp,node_id,count) or a prepared cache.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Graph JSON {"n", "edges", "labels"}.
    #[arg(long, global = true)]
    graph: Option<PathBuf>,
    /// Output root; defaults to $MPGAT_OUT, then ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Name of the run directory under the output root.
    #[arg(long, global = true)]
    run_name: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    tin: Option<usize>,
    #[arg(long, global = true)]
    tout: Option<usize>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    blocks: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    runs: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its graph.
    Synth(SynthArgs),
    /// Window, split and normalize a dataset into a cache file.
    Prepare(PrepareArgs),
    /// Train (one run or a multi-seed batch) and score on the test split.
    Train(TrainArgs),
    /// Score a checkpoint and the persistence baseline on the test split.
    Eval(EvalArgs),
    /// Rank-sum comparison of two run-report sets.
    Compare(CompareArgs),
    /// Forecast the next T_out steps from a given origin.
    Predict(PredictArgs),
    /// Write plot-ready CSV tables from an eval run.
    ExportPlot(ExportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    peak_ratio: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    #[arg(long)]
    cache_out: Option<PathBuf>,
    /// train,val,test ratios.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// 4 for the multivariate stack, 1 for counts only.
    #[arg(long)]
    features: Option<usize>,
    /// Comma-separated report horizons in steps.
    #[arg(long)]
    horizons: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_batches: Option<usize>,
    #[arg(long)]
    max_val: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    d_residual: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    horizons: Option<String>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Run reports (JSON lines) of the first method.
    #[arg(long)]
    a: Option<PathBuf>,
    #[arg(long)]
    b: Option<PathBuf>,
    #[arg(long)]
    a_name: Option<String>,
    #[arg(long)]
    b_name: Option<String>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Forecast origin, e.g. 2020-01-05T08:00:00.
    #[arg(long)]
    at: Option<String>,
    /// Floor forecasts at zero.
    #[arg(long)]
    clamp_zero: bool,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Eval run directory.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Horizon (steps) of the prediction-vs-truth series.
    #[arg(long)]
    plot_horizon: Option<usize>,
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn push<T: ToString>(out: &mut Vec<(&'static str, String)>, key: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key, v.to_string()));
    }
}

fn overrides(cli: &Cli) -> Vec<(&'static str, String)> {
    let s = &cli.shared;
    let mut o = Vec::new();
    push(&mut o, "data", &path_str(&s.data));
    push(&mut o, "graph", &path_str(&s.graph));
    push(&mut o, "out", &path_str(&s.out));
    push(&mut o, "run_name", &s.run_name);
    push(&mut o, "seed", &s.seed);
    push(&mut o, "tin", &s.tin);
    push(&mut o, "tout", &s.tout);
    push(&mut o, "beta", &s.beta);
    push(&mut o, "blocks", &s.blocks);
    push(&mut o, "lr", &s.lr);
    push(&mut o, "runs", &s.runs);
    push(&mut o, "alpha", &s.alpha);
    match &cli.command {
        Command::Synth(a) => {
            push(&mut o, "nodes", &a.nodes);
            push(&mut o, "days", &a.days);
            push(&mut o, "peak_ratio", &a.peak_ratio);
            push(&mut o, "noise", &a.noise);
        }
        Command::Prepare(a) => {
            push(&mut o, "cache_out", &path_str(&a.cache_out));
            push(&mut o, "split", &a.split);
        }
        Command::Train(a) => {
            push(&mut o, "features", &a.features);
            push(&mut o, "horizons", &a.horizons);
            push(&mut o, "batch_size", &a.batch_size);
            push(&mut o, "max_epochs", &a.epochs);
            push(&mut o, "patience", &a.patience);
            push(&mut o, "max_batches", &a.max_batches);
            push(&mut o, "max_val", &a.max_val);
            push(&mut o, "workers", &a.workers);
            push(&mut o, "d_residual", &a.d_residual);
        }
        Command::Eval(a) => {
            push(&mut o, "checkpoint", &path_str(&a.checkpoint));
            push(&mut o, "horizons", &a.horizons);
        }
        Command::Compare(a) => {
            push(&mut o, "a", &path_str(&a.a));
            push(&mut o, "b", &path_str(&a.b));
            push(&mut o, "a_name", &a.a_name);
            push(&mut o, "b_name", &a.b_name);
        }
        Command::Predict(a) => {
            push(&mut o, "checkpoint", &path_str(&a.checkpoint));
            push(&mut o, "at", &a.at);
            if a.clamp_zero {
                o.push(("clamp_zero", "true".into()));
            }
        }
        Command::ExportPlot(a) => {
            push(&mut o, "from", &path_str(&a.from));
            push(&mut o, "plot_horizon", &a.plot_horizon);
        }
    }
    o
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut settings = Settings::default();
    if let Some(path) = &cli.shared.config {
        settings.load_file(path)?;
    }
    for (key, value) in overrides(&cli) {
        settings.set(key, &value)?;
    }
    match cli.command {
        Command::Synth(_) => commands::synth(&settings),
        Command::Prepare(_) => commands::prepare(&settings),
        Command::Train(_) => commands::train(&settings),
        Command::Eval(_) => commands::eval(&settings),
        Command::Compare(_) => commands::compare(&settings),
        Command::Predict(_) => commands::predict(&settings),
        Command::ExportPlot(_) => commands::export_plot(&settings),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.code())
        }
    }
}
