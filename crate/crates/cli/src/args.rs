use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "abra", version, about = "Plate-shift benchmark, robust training and evaluation")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic plate dataset (PLT1 file, TOML sidecar, manifest).
    Gen(GenArgs),
    /// Train a model and write checkpoint, report, loss traces and manifest.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset, optionally with sweeps and diagnostics.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// TOML file with defaults for any flag; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of plates.
    #[arg(long, default_value_t = 8)]
    pub plates: usize,
    /// How many plates are held out for validation.
    #[arg(long, default_value_t = 0)]
    pub val_plates: usize,
    /// How many plates are held out for testing.
    #[arg(long, default_value_t = 2)]
    pub test_plates: usize,
    /// Images per plate; must be a multiple of --classes.
    #[arg(long, default_value_t = 200)]
    pub per_plate: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    /// Shift severity: spread of per-plate channel gains and offsets.
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    pub tau: f64,
    /// Spread of the class prototypes.
    #[arg(long, default_value_t = 0.3, allow_negative_numbers = true)]
    pub contrast: f64,
    /// Pixel noise level.
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    pub noise: f64,
    /// Amplitude of per-sample smooth deformations.
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    pub jitter: f64,
    /// Standardize every image per channel over its pixels before writing.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub self_standardize: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset path.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Erm,
    Adabn,
    Advstyle,
    Abra,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Plain,
    Tta,
}

/// Named objective mixes; explicit --lambda / --js-weight still take precedence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossPreset {
    /// Cross-entropy only (lambda 1, no JS term).
    Ce,
    /// Equal mix of cross-entropy and ArcFace (lambda 0.5, no JS term).
    CeArc,
    /// Equal mix plus the JS alignment term (lambda 0.5, JS weight 1).
    Full,
    /// ArcFace only (lambda 0, no JS term).
    Arc,
}

impl LossPreset {
    pub fn lambda_and_js(self) -> (f64, f64) {
        match self {
            LossPreset::Ce => (1.0, 0.0),
            LossPreset::CeArc => (0.5, 0.0),
            LossPreset::Full => (0.5, 1.0),
            LossPreset::Arc => (0.0, 0.0),
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML file with defaults for any flag; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset written by `abra gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Abra)]
    pub method: MethodArg,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Peak learning rate after warmup.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Fraction of training over which the rate ramps up linearly from lr/100.
    #[arg(long, default_value_t = 0.1)]
    pub warmup_frac: f64,
    /// L2 penalty on convolution and classifier weights.
    #[arg(long, default_value_t = 1e-5)]
    pub weight_decay: f64,
    /// Objective preset.
    #[arg(long, value_enum)]
    pub loss: Option<LossPreset>,
    /// Cross-entropy weight; ArcFace receives 1 - lambda.
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    /// ArcFace additive angular margin in radians.
    #[arg(long, default_value_t = 0.2)]
    pub margin: f64,
    /// ArcFace cosine scale.
    #[arg(long, default_value_t = 16.0)]
    pub scale: f64,
    /// Weight of the JS alignment term (abra only).
    #[arg(long, default_value_t = 1.0)]
    pub js_weight: f64,
    /// Blocks after which statistics are perturbed (abra, advstyle).
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub sites: Vec<usize>,
    /// Ascent steps on the perturbation magnitudes per iteration.
    #[arg(long, default_value_t = 1)]
    pub ascent_steps: usize,
    /// Ascent step size; follows the learning-rate schedule when omitted.
    #[arg(long)]
    pub ascent_lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random flips and quarter turns of training images.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub augment: bool,
    /// Inference mode for the report; adabn defaults to tta, the rest to plain.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PlateSet {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Diagnostic {
    /// KL and MMD between stored and target BN statistics, per layer.
    Bnshift,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// TOML file with defaults for any flag; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint written by `abra train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Plain)]
    pub mode: ModeArg,
    /// Which plates to score.
    #[arg(long, value_enum, default_value_t = PlateSet::Test)]
    pub plates: PlateSet,
    /// Chunk sizes for the batch-size sweep, e.g. 8,32,128.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<usize>>,
    /// Resamples per sweep size.
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    /// Seed for the sweep shuffles.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum)]
    pub diagnostics: Option<Diagnostic>,
    /// Write per-sample embeddings of the scored plates to this CSV file.
    #[arg(long)]
    pub export: Option<PathBuf>,
    /// Directory for report.txt and manifest.toml; the report always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
