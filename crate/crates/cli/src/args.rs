use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "satmap", version, about = "Satellite-prior vectorized map construction toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score predicted maps against ground truth (Chamfer-based mAP).
    Eval(EvalArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a synthetic dataset and write a checkpoint.
    Train(TrainArgs),
    /// Train and score a grid of satellite backbones and fusion strategies.
    Ablate(AblateArgs),
    /// Cut an ego-aligned satellite crop out of a tile directory.
    CropSat(CropArgs),
    /// Finite-difference check of the full model loss gradient.
    Gradcheck(GradcheckArgs),
    /// Draw maps (and optionally a satellite raster) side by side.
    Rasterize(RasterizeArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted map, or a JSON array of maps paired with --gt by position.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth map or array of maps.
    #[arg(long)]
    pub gt: PathBuf,
    /// Report every tag split (weather and so on) next to the full pool.
    #[arg(long)]
    pub per_tag: bool,
    /// Evaluation settings (thresholds, interpolation, classes).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    /// Base seed; falls back to SATMAP_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of the satellite raster covered by occluders.
    #[arg(long, default_value_t = 0.0)]
    pub occlusion: f64,
    /// Maximum satellite misalignment in pixels.
    #[arg(long, default_value_t = 0)]
    pub misalign: u32,
    /// Occluding rectangles per camera image.
    #[arg(long, default_value_t = 0)]
    pub occluders: usize,
    /// Weather tags assigned round-robin.
    #[arg(long, value_delimiter = ',', default_value = "sunny")]
    pub weather: Vec<String>,
    /// Scene template (JSON scene parameters); flags above override it.
    #[arg(long)]
    pub template: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model configuration; the built-in toy model when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint manifest path; parameters go next to it with a `.bin`
    /// extension and the loss trace with `.trace.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    #[arg(long, default_value_t = 10.0)]
    pub clip_norm: f64,
    /// Record training-set mAP every this many steps (0: never).
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Training dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset to score on; the training set when absent.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// `backbones×fusions`, e.g. `attention,conv×conv_fuser,cross_attention,camera_only`
    /// (`x` also separates the two lists).
    #[arg(long, default_value = "attention,conv×conv_fuser,cross_attention,camera_only")]
    pub grid: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    /// Training seeds; SATMAP_SEED (or 0) alone when absent.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Base model configuration; backbone and fusion are set per run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CropArgs {
    /// Tile directory laid out as `z/x/y.png`.
    #[arg(long)]
    pub tiles: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub zoom: u32,
    #[arg(long, allow_hyphen_values = true)]
    pub lat: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub lon: f64,
    /// Heading in degrees, counterclockwise from east.
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    pub heading: f64,
    /// Forward and lateral extent in meters.
    #[arg(long, value_delimiter = ',', default_value = "60,30")]
    pub range: Vec<f64>,
    /// Output PNG; the JSON sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Fill color `r,g,b` for missing tiles; missing tiles are an error when absent.
    #[arg(long, value_delimiter = ',')]
    pub fill: Vec<u8>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model configuration; the built-in toy model when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Randomly chosen entries per parameter block (plus its largest-gradient entry).
    #[arg(long, default_value_t = 1)]
    pub entries: usize,
    /// Negative control: scale the backward rule of this op kind.
    #[arg(long)]
    pub corrupt: Option<String>,
    #[arg(long, default_value_t = 1.5)]
    pub corrupt_scale: f64,
}

#[derive(Debug, Args)]
pub struct RasterizeArgs {
    /// Map to draw (ground truth, say).
    #[arg(long)]
    pub map: PathBuf,
    /// Second map drawn in its own panel (a prediction, say).
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Satellite raster shown as the first panel, with the map drawn over it.
    #[arg(long)]
    pub sat: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// `x_min,x_max,y_min,y_max` in ego meters.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-15,15,-7.5,7.5")]
    pub range: Vec<f64>,
    #[arg(long, default_value_t = 8.0)]
    pub px_per_m: f64,
    #[arg(long, default_value_t = 2)]
    pub stroke: u32,
    /// Predicted instances below this score are not drawn.
    #[arg(long, default_value_t = 0.3)]
    pub min_score: f64,
}
