//! `impress` command-line driver. Each subcommand reads and writes plain
//! files (JSONL corpora, CSV tables, JSON manifests) so stages can be run
//! and re-run independently.

pub mod commands;
pub mod files;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use files::Roots;

#[derive(Debug, Parser)]
#[command(name = "impress", version, about = "Report impression workbench")]
pub struct Cli {
    /// Relative data paths (corpora, tables, outputs) resolve against this.
    #[arg(long, global = true, env = "IMPRESS_DATA_ROOT")]
    pub data_root: Option<PathBuf>,
    /// Relative checkpoint paths resolve against this.
    #[arg(long, global = true, env = "IMPRESS_CHECKPOINT_ROOT")]
    pub checkpoint_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic two-style corpus.
    Synth(SynthArgs),
    /// Validate a corpus, scan for PHI, split it and register style tokens.
    Prep(PrepArgs),
    /// Fine-tune a toy model from a TOML training config.
    Train(TrainArgs),
    /// Generate impressions for one cohort.
    Generate(GenerateArgs),
    /// Score generated impressions with the metric suite.
    Score(ScoreArgs),
    /// Metric meta-evaluation, model comparison and cohort shift.
    #[command(subcommand)]
    Benchmark(BenchmarkCommand),
    /// Deauville score agreement between generated and reference impressions.
    Deauville(DeauvilleArgs),
    /// Bootstrap intervals and exceedance tests on plain value files.
    #[command(subcommand)]
    Stats(StatsCommand),
    /// Build a reader-study case pool from a corpus and generated impressions.
    Pool(PoolArgs),
    /// Run the reader-study HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Reports whose reference impression carries a Deauville score.
    #[arg(long, default_value_t = 0)]
    pub n_ds: usize,
    #[arg(long, default_value_t = 1)]
    pub physicians_per_style: usize,
    #[arg(long, default_value_t = 250)]
    pub findings_min: usize,
    #[arg(long, default_value_t = 500)]
    pub findings_max: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PrepArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory for split.json, registry.json, issues.json and phi.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub train: usize,
    #[arg(long)]
    pub val: usize,
    #[arg(long)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "PHY")]
    pub token_prefix: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// TOML training config.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory written by `prep`.
    #[arg(long)]
    pub prep: PathBuf,
    /// Checkpoint directory (`best/`, `last/`, loss.csv, run.json).
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenerateArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory written by `prep`; required unless `--cohort all`.
    #[arg(long)]
    pub prep: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Cohort::Test)]
    pub cohort: Cohort,
    /// Output JSONL of `{report_id, impression, score, truncated}`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long, default_value_t = 256)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = 1.0)]
    pub length_penalty: f64,
    #[arg(long, default_value_t = 3)]
    pub no_repeat_ngram: usize,
    /// Dictate every report in this physician's style.
    #[arg(long)]
    pub as_physician: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub generated: PathBuf,
    /// Long-format table (`metric,report_id,value`).
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated metric names; all registered metrics when omitted.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<String>,
    /// Checkpoint used for the likelihood metrics (`genscore_*`).
    #[arg(long)]
    pub scorer: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum BenchmarkCommand {
    /// Rank metrics by Spearman correlation with a reader's scores.
    Rank(RankArgs),
    /// Normalized models x metrics grid with significance markers.
    Compare(CompareArgs),
    /// Relative change of metric means between two cohorts.
    Shift(ShiftArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BootstrapArgs {
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RankArgs {
    /// Long-format metric table.
    #[arg(long)]
    pub table: PathBuf,
    /// `report_id,score` CSV.
    #[arg(long)]
    pub human: PathBuf,
    /// Second reader, for the inter-reader row.
    #[arg(long)]
    pub second: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub bootstrap: BootstrapArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompareArgs {
    /// `name=table.csv`, at least two.
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub bootstrap: BootstrapArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ShiftArgs {
    #[arg(long)]
    pub internal: PathBuf,
    #[arg(long)]
    pub external: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub bootstrap: BootstrapArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DeauvilleArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub generated: PathBuf,
    /// Directory for summary.csv, confusion.csv and cases.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "model")]
    pub model_name: String,
    #[command(flatten)]
    pub bootstrap: BootstrapArgs,
}

#[derive(Debug, Subcommand)]
pub enum StatsCommand {
    /// Bootstrap CI of the mean of one value file.
    Ci(CiArgs),
    /// Exceedance test of mean(a) > mean(b).
    Exceedance(ExceedanceArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CiArgs {
    /// One number per line.
    #[arg(long)]
    pub values: PathBuf,
    #[command(flatten)]
    pub bootstrap: BootstrapArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExceedanceArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Resample case indices jointly (files must align line by line).
    #[arg(long)]
    pub paired: bool,
    #[command(flatten)]
    pub bootstrap: BootstrapArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PoolArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ServeArgs {
    /// Service TOML; IMPRESS_BIND, IMPRESS_DATA_DIR and IMPRESS_TOKEN override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Case pool JSONL loaded before serving.
    #[arg(long)]
    pub pool: Option<PathBuf>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let roots = Roots {
        data: cli.data_root,
        checkpoints: cli.checkpoint_root,
    };
    match cli.command {
        Command::Synth(a) => commands::synth(&roots, &a),
        Command::Prep(a) => commands::prep(&roots, &a),
        Command::Train(a) => commands::train(&roots, &a),
        Command::Generate(a) => commands::generate(&roots, &a),
        Command::Score(a) => commands::score(&roots, &a),
        Command::Benchmark(BenchmarkCommand::Rank(a)) => commands::rank(&roots, &a),
        Command::Benchmark(BenchmarkCommand::Compare(a)) => commands::compare(&roots, &a),
        Command::Benchmark(BenchmarkCommand::Shift(a)) => commands::shift(&roots, &a),
        Command::Deauville(a) => commands::deauville(&roots, &a),
        Command::Stats(StatsCommand::Ci(a)) => commands::ci(&roots, &a),
        Command::Stats(StatsCommand::Exceedance(a)) => commands::exceedance(&roots, &a),
        Command::Pool(a) => commands::pool(&roots, &a),
        Command::Serve(a) => commands::serve(&roots, &a),
    }
}
