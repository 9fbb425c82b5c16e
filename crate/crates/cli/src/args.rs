//! Command-line flags.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "segrisk", version, about = "Tissue segmentation loss comparison and biopsy risk classification")]
pub struct Cli {
    /// Run every data-parallel step on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate synthetic RGB tiles with masks and/or a graded slide cohort.
    GenSynth(GenSynthArgs),
    /// Train the pixel scorer with one loss.
    Train(TrainArgs),
    /// Train with all four losses and tabulate per-class test Dice.
    CompareLosses(CompareArgs),
    /// Extract per-fragment and per-slide features from segmentation maps.
    Features(FeaturesArgs),
    /// Cross-validate the random-forest risk classifier.
    Classify(ClassifyArgs),
    /// Score predictions against references.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of tiles (ignored when --split is given).
    #[arg(long, default_value_t = 0)]
    pub tiles: usize,
    /// Tile counts for train,val,test subdirectories.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<usize>>,
    /// Number of slides in the graded cohort.
    #[arg(long, default_value_t = 0)]
    pub cohort: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// `six`, `all`, or 14 comma-separated class weights.
    #[arg(long, default_value = "all")]
    pub mix: String,
    #[arg(long, default_value_t = 12.0)]
    pub blob_scale: f64,
    /// Std of the additive colour noise.
    #[arg(long, default_value_t = 0.04)]
    pub color_noise: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossName {
    Cc,
    Focal,
    Bitempered,
    Lovasz,
}

/// Loss hyperparameters and optimisation schedule shared by `train` and `compare-losses`.
#[derive(Debug, Args, Serialize)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 0.25)]
    pub alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.8)]
    pub t1: f64,
    #[arg(long, default_value_t = 1.2)]
    pub t2: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.5)]
    pub plateau_factor: f64,
    #[arg(long, default_value_t = 20)]
    pub plateau_patience: usize,
    #[arg(long, default_value_t = 50)]
    pub early_stop: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 50)]
    pub iterations: usize,
    #[arg(long, default_value_t = 5)]
    pub batch: usize,
    /// Disable flip/rot90 augmentation.
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub loss: LossName,
    /// Directory of training tiles.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of validation tiles.
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    /// Dataset root with train/, val/ and test/ tile directories.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of training-mask pixels relabelled at random.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ConnectivityArg {
    #[value(name = "4")]
    #[serde(rename = "4")]
    Four,
    #[value(name = "8")]
    #[serde(rename = "8")]
    Eight,
}

#[derive(Debug, Args, Serialize)]
pub struct FeaturesArgs {
    /// Directory of slide segmentation maps (`<slide_id>.pgm`).
    #[arg(long)]
    pub segmaps: PathBuf,
    /// Area of one pixel in µm².
    #[arg(long, default_value_t = 1.0)]
    pub pixel_area: f64,
    #[arg(long, value_enum, default_value = "4")]
    pub connectivity: ConnectivityArg,
    /// Per-fragment grades (`slide_id,frag_id,grade`); adds worst-grade slide labels.
    #[arg(long)]
    pub fragment_labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ClassifyArgs {
    /// Features CSV; slide rows (`frag_id` = `slide`) are used.
    #[arg(long)]
    pub features: PathBuf,
    /// `slide_id,grade` CSV.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 1000)]
    pub trees: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    Dice,
    F1,
    Kappa,
}

#[derive(Debug, Args, Serialize)]
pub struct MetricsArgs {
    /// Prediction mask (`.pgm`) or directory of masks; for kappa an `id,grade` CSV.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference in the same form as --pred.
    #[arg(long)]
    pub r#ref: PathBuf,
    #[arg(long, value_enum, default_value = "dice")]
    pub metric: MetricName,
    /// RGB tensor of the reference image; bright pixels become background first.
    #[arg(long)]
    pub lumen_relabel: Option<PathBuf>,
    /// Score classes absent from both maps as 0 instead of leaving them out.
    #[arg(long)]
    pub absent_zero: bool,
    /// Number of classes (Dice/F1) or ordinal categories (kappa).
    #[arg(long)]
    pub classes: Option<usize>,
    /// Write report.json and a manifest here instead of printing the report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
