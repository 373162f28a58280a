//! `physformer` command-line entry point.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error
//! (bad flags, missing or invalid configuration).

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use physformer::model::ModelKind;

#[derive(Parser, Debug)]
#[command(name = "physformer", version, about = "Remote photoplethysmography with PhysFormer and PhysFormer++")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    SynthGen(SynthGenArgs),
    /// Train a model and write the best checkpoint and loss curves.
    Train(TrainArgs),
    /// Score a checkpoint (or a freshly initialized model) on held-out clips.
    Eval(EvalArgs),
    /// Write the predicted signal of one clip as CSV.
    Infer(InferArgs),
    /// Write attention and periodic maps of one clip as PGM images and tensors.
    ExportAttention(InferArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Render a CSV file as an SVG line chart.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct SynthGenArgs {
    /// Generator settings (JSON); defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    clips: usize,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

/// Where clips come from: a dataset directory, or synthetic clips generated
/// in memory from `--seed` and `--clips`.
#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Dataset directory; synthetic clips are generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of synthetic clips to generate when `--data` is absent.
    #[arg(long, default_value_t = 200)]
    clips: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training settings (JSON); defaults otherwise. `--model` and `--seed`
    /// override the file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelKind>,
    #[command(flatten)]
    data: DataArgs,
    /// Run directory for `checkpoint/`, `curves.csv` and `validation.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint directory; a model initialized from `--seed` otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = parse_model, default_value = "physformer")]
    model: ModelKind,
    #[command(flatten)]
    data: DataArgs,
    /// Score every clip instead of the held-out fifth.
    #[arg(long)]
    all: bool,
    /// Output directory for `metrics.json`, `summary.csv` and `clips.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Clip index within the dataset.
    #[arg(long, default_value_t = 0)]
    clip: usize,
    /// Output file (`infer`) or directory (`export-attention`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// CSV with a header row.
    #[arg(long)]
    input: PathBuf,
    /// Column for the horizontal axis; the first column by default.
    #[arg(long)]
    x: Option<String>,
    /// Comma-separated columns to draw; every other numeric column by default.
    #[arg(long, value_delimiter = ',')]
    y: Vec<String>,
    #[arg(long)]
    title: Option<String>,
    /// Output SVG file.
    #[arg(long)]
    out: PathBuf,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: physformer::Error| e.to_string())
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = physformer::train::configure_threads()
        .map_err(|e| Failure::Usage(e.to_string()))
        .and_then(|_| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::SynthGen(a) => commands::synth_gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Infer(a) => commands::infer(a),
        Command::ExportAttention(a) => commands::export_attention(a),
        Command::Gradcheck => commands::gradcheck(),
        Command::Plot(a) => plot::run(a),
    }
}
