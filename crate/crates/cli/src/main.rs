//! `eibench`: invariance measurement and correlation studies from the shell.
//!
//! Payloads go to stdout (JSON by default, CSV with `--format csv`);
//! diagnostics go to stderr. Exit status: 0 success, 1 validation or
//! degenerate input, 2 I/O or format failure, 3 usage error.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eibench_core::metrics::{ConfidenceSource, MeasureKind};
use eibench_core::predstore::TransformTag;

use crate::error::CliError;

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (EIPRED1 format_version 1)");

#[derive(Debug, Parser)]
#[command(name = "eibench", version = VERSION, about = "Effective Invariance toolkit")]
pub struct Cli {
    /// Upper bound on worker threads for data-parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output format for stdout payloads.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a transformed copy of an image directory (PNG output).
    Transform(TransformArgs),
    /// Score one model's invariance from original and transformed dumps.
    Measure(MeasureArgs),
    /// Model-centric or dataset-centric correlation study.
    Correlate(CorrelateArgs),
    /// Predict accuracy on unlabelled test sets from invariance.
    Predict(PredictArgs),
    /// Rank models by invariance on one test set.
    Rank(RankArgs),
    /// Generate a synthetic population of prediction dumps.
    Synth(SynthArgs),
    /// Check prediction dumps against the format invariants.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_parser = parse_tag)]
    tag: TransformTag,
    /// Abort on the first undecodable image instead of skipping it.
    #[arg(long)]
    fail_fast: bool,
}

#[derive(Debug, Args)]
pub struct MeasureArgs {
    /// Untransformed dump (`.pred`, or `.csv` fixture).
    #[arg(long)]
    orig: PathBuf,
    /// One transformed dump, or three comma-separated rot90,rot180,rot270 dumps.
    #[arg(long, value_delimiter = ',', required = true)]
    trans: Vec<PathBuf>,
    #[arg(long, value_parser = parse_measure)]
    kind: MeasureKind,
    /// Combine agreeing confidences with the arithmetic instead of the geometric mean.
    #[arg(long)]
    arithmetic_mean: bool,
    /// Side on which `confidence_only` is computed.
    #[arg(long, value_enum, default_value_t = ConfidenceSide::Transformed)]
    confidence_source: ConfidenceSide,
    /// Model id for CSV fixtures.
    #[arg(long, default_value = "model")]
    model_id: String,
    /// Dataset id for CSV fixtures.
    #[arg(long, default_value = "dataset")]
    dataset_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConfidenceSide {
    Original,
    Transformed,
}

impl From<ConfidenceSide> for ConfidenceSource {
    fn from(s: ConfidenceSide) -> Self {
        match s {
            ConfidenceSide::Original => ConfidenceSource::Original,
            ConfidenceSide::Transformed => ConfidenceSource::Transformed,
        }
    }
}

#[derive(Debug, Args)]
pub struct BandArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bootstrap resamples.
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    /// Confidence level of the bootstrap band.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupBy {
    Tag,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// Directory of model records (`*.json`).
    #[arg(long)]
    records: PathBuf,
    /// Test set for a model-centric study.
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    dataset: Option<String>,
    /// Model for a dataset-centric study.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, value_parser = parse_measure)]
    measure: MeasureKind,
    #[arg(long, value_enum)]
    group_by: Option<GroupBy>,
    #[command(flatten)]
    band: BandArgs,
    /// Also write the report here, plus a points CSV next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    records: PathBuf,
    /// Comma-separated training test sets.
    #[arg(long, value_delimiter = ',', required = true)]
    train: Vec<String>,
    /// Comma-separated test sets to predict.
    #[arg(long, value_delimiter = ',', required = true)]
    target: Vec<String>,
    #[arg(long, value_parser = parse_measure, default_value = "ei")]
    measure: MeasureKind,
    /// Restrict to one model.
    #[arg(long)]
    model: Option<String>,
    #[command(flatten)]
    band: BandArgs,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    dataset: String,
    #[arg(long, value_parser = parse_measure, default_value = "ei")]
    measure: MeasureKind,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON population config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

fn parse_tag(s: &str) -> Result<TransformTag, String> {
    s.parse().map_err(|e: eibench_core::predstore::UnknownTag| e.to_string())
}

fn parse_measure(s: &str) -> Result<MeasureKind, String> {
    s.parse()
        .map_err(|e: eibench_core::metrics::UnknownMeasure| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    let _ = e.print();
                    CliError::Usage(String::new()).exit_code()
                }
            };
        }
    };
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return CliError::Usage(String::new()).exit_code();
        }
        eibench_core::par::configure_threads(threads);
    }
    match commands::run(cli.command, cli.format) {
        Ok(payload) => {
            print!("{payload}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
