use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use geobdl::data::TargetTransform;
use geobdl::predict::{BoundingBox, Product};
use serde::{Serialize, Serializer};

#[derive(Debug, Parser)]
#[command(name = "geobdl", version, about = "Bayesian deep-learning interpolation of point data with gridded covariates")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Flat `key = value` file of flag defaults; explicit flags win
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel sections (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More log output (repeatable)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    /// Only log errors
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic terrain raster and observations with known truth
    #[command(args_override_self = true)]
    Synth(SynthArgs),
    /// Extract patches, assign folds and report what was retained
    #[command(args_override_self = true)]
    Ingest(IngestArgs),
    /// Train a network; with --dropout-rates, tune the rate first
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Train once per dropout rate and keep the best on the evaluation fold
    #[command(args_override_self = true)]
    Tune(TrainArgs),
    /// Score a checkpoint on a held-out fold
    #[command(args_override_self = true)]
    Evaluate(EvaluateArgs),
    /// Predict map products over a region
    #[command(args_override_self = true)]
    PredictMap(MapArgs),
    /// Predict along a south-north line of fixed easting
    #[command(args_override_self = true)]
    Xsection(XsectionArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Raster side length in cells
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 100.0)]
    pub cellsize: f64,
    /// Number of observations
    #[arg(long, default_value_t = 4000)]
    pub n: usize,
    /// Multiplier on the noise standard deviation
    #[arg(long, default_value_t = 1.0)]
    pub noise_scale: f64,
    /// Flat terrain, leaving only the spatial trend
    #[arg(long)]
    pub flat: bool,
    #[arg(long, short = 'o')]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Auxiliary raster in ASCII grid format
    #[arg(long)]
    pub raster: PathBuf,
    /// Observations CSV with header easting,northing,value
    #[arg(long)]
    pub observations: PathBuf,
    /// Patch side length in cells
    #[arg(long, default_value_t = 32)]
    pub patch_size: usize,
    /// Patch cell spacing in map units
    #[arg(long, default_value_t = 250.0)]
    pub patch_cellsize: f64,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    /// Transform applied to target values: none or log
    #[arg(long, default_value = "none")]
    pub target_transform: TargetTransform,
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short = 'o')]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DtypeArg {
    F64,
    F32,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Channels in every convolution
    #[arg(long, default_value_t = 128)]
    pub conv_channels: usize,
    /// Width of the location branch
    #[arg(long, default_value_t = 512)]
    pub dense_width: usize,
    /// Hidden widths of the head, comma separated
    #[arg(long, value_delimiter = ',', default_value = "256,128")]
    pub head_widths: Vec<usize>,
    /// Keep the convolutional branch deterministic
    #[arg(long)]
    pub no_conv_dropout: bool,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 400)]
    pub max_epochs: usize,
    /// Epochs without improvement before stopping
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout_rate: f64,
    /// Candidate dropout rates, comma separated
    #[arg(long, value_delimiter = ',')]
    pub dropout_rates: Vec<f64>,
    /// Masks used for the evaluation-fold NLL after each epoch
    #[arg(long, default_value_t = 20)]
    pub eval_samples: usize,
    #[arg(long, default_value_t = 10.0)]
    pub clip_norm: f64,
    /// Hold the predicted variance at one
    #[arg(long)]
    pub freeze_variance: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Weight precision in the checkpoint
    #[arg(long, value_enum, default_value = "f64")]
    pub dtype: DtypeArg,
    #[arg(long, short = 'o')]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Eval,
    Test,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub raster: PathBuf,
    #[arg(long)]
    pub observations: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Permit scoring on the training folds
    #[arg(long)]
    pub allow_train_eval: bool,
    /// Monte Carlo dropout samples per observation
    #[arg(long, short = 'S', default_value_t = 50)]
    pub samples: usize,
    /// Central interval levels for coverage, comma separated
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.7,0.95")]
    pub levels: Vec<f64>,
    /// Histogram bins for the distribution comparison
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
    /// Prediction seed (default: the checkpoint's seed)
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short = 'o')]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub raster: PathBuf,
    /// xmin,ymin,xmax,ymax (default: the raster extent)
    #[arg(long, allow_hyphen_values = true)]
    pub region: Option<BoundingBox>,
    /// Output cell size (default: the raster's)
    #[arg(long)]
    pub cellsize: Option<f64>,
    /// mean, sd_total, sd_epistemic, sd_aleatoric, q:<level>, exceed:<threshold>
    #[arg(long, value_delimiter = ',', default_value = "mean,sd_total,sd_epistemic,sd_aleatoric")]
    #[serde(serialize_with = "display_all")]
    pub products: Vec<Product>,
    #[arg(long, short = 'S', default_value_t = 100)]
    pub samples: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short = 'o')]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct XsectionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub raster: PathBuf,
    /// Easting of the line
    #[arg(long, allow_hyphen_values = true)]
    pub easting: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub northing_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub northing_max: Option<f64>,
    /// Spacing between rows (default: the raster cell size)
    #[arg(long)]
    pub step: Option<f64>,
    /// Level of both central bands
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, short = 'S', default_value_t = 100)]
    pub samples: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Observations to overlay
    #[arg(long)]
    pub observations: Option<PathBuf>,
    /// Overlay half-width either side of the line
    #[arg(long, default_value_t = 500.0)]
    pub window: f64,
    #[arg(long, short = 'o')]
    pub out_dir: PathBuf,
}

fn display_all<S: Serializer>(v: &[Product], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|p| p.to_string()))
}
