use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use semiformer::data::DatasetId;
use semiformer::objective::{PseudoSource, VariantName};

use crate::config::Preset;

#[derive(Debug, Parser)]
#[command(name = "semiformer", version, about = "Semi-supervised dual-stream image classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a labeled/unlabeled split and write it as JSON.
    Split(SplitArgs),
    /// Train one variant into a run directory.
    Train(TrainArgs),
    /// Evaluate a run's checkpoint on the test set.
    Eval(EvalArgs),
    /// Summarize run directories into tables, CSV files and plots.
    Report(ReportArgs),
}

fn parse_variant(s: &str) -> Result<VariantName, String> {
    s.parse().map_err(|e: semiformer::Error| e.to_string())
}

fn parse_source(s: &str) -> Result<PseudoSource, String> {
    s.parse().map_err(|e: semiformer::Error| e.to_string())
}

fn parse_dataset(s: &str) -> Result<DatasetId, String> {
    s.parse().map_err(|e: semiformer::Error| e.to_string())
}

/// Data selection flags shared by `split` and `train`.
#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Experiment config (TOML); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// cifar10, cifar100 or synthetic.
    #[arg(long, value_parser = parse_dataset)]
    pub dataset: Option<DatasetId>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Labeled share of the training set, in (0, 1].
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Keep only the first N training images per class.
    #[arg(long)]
    pub per_class_limit: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Same as --split-seed.
    #[arg(long, conflicts_with = "split_seed")]
    pub seed: Option<u64>,
    /// Output JSON path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// sup, vanilla-cnn, vanilla-vit, conv-labeled or semiformer.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<VariantName>,
    /// cnn, transformer or fused.
    #[arg(long, value_parser = parse_source)]
    pub pseudo_source: Option<PseudoSource>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub labeled_only_epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    /// Evaluate on the first N test images only.
    #[arg(long)]
    pub eval_limit: Option<usize>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Use this split file instead of drawing one.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue the run in --out from its last checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Defaults to the run's last checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate on the first N test images only.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}
