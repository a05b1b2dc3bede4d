use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "gatedvlad", version, about = "Gated NetVLAD video classification under a size budget")]
pub struct Cli {
    /// Worker threads for parallel sections. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-label frame-feature dataset.
    GenData(GenDataArgs),
    /// Split a dataset into disjoint train and validate files.
    Split(SplitArgs),
    /// Train one model and write its checkpoints, loss.csv and run.json.
    Train(TrainArgs),
    /// Average checkpoints of one run elementwise.
    AverageCheckpoints(AverageArgs),
    /// GAP of a checkpoint or ensemble on a dataset.
    Eval(EvalArgs),
    /// Store selected tensors of a checkpoint in half precision.
    Compress(CompressArgs),
    /// Tensor-by-tensor size table for a checkpoint or an architecture.
    SizeReport(SizeReportArgs),
    /// Search accounting flags that reproduce the published single-model sizes.
    CalibrateSizes(CalibrateArgs),
    /// Storage rate of a pruned tensor stored sparsely.
    AnalyzeSparsity(SparsityArgs),
    /// Storage rate of quantizing from one bit width to another.
    AnalyzeQuantization(QuantizationArgs),
    /// Combine member checkpoints into an ensemble manifest.
    BuildEnsemble(BuildEnsembleArgs),
    /// Grid-search ensemble coefficients on a validation set.
    TuneEnsemble(TuneEnsembleArgs),
    /// Check an ensemble manifest against its byte budget.
    BudgetCheck(BudgetCheckArgs),
    /// Write top-k predictions of a checkpoint or ensemble as CSV.
    Predict(PredictArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Split(_) => "split",
            Command::Train(_) => "train",
            Command::AverageCheckpoints(_) => "average-checkpoints",
            Command::Eval(_) => "eval",
            Command::Compress(_) => "compress",
            Command::SizeReport(_) => "size-report",
            Command::CalibrateSizes(_) => "calibrate-sizes",
            Command::AnalyzeSparsity(_) => "analyze-sparsity",
            Command::AnalyzeQuantization(_) => "analyze-quantization",
            Command::BuildEnsemble(_) => "build-ensemble",
            Command::TuneEnsemble(_) => "tune-ensemble",
            Command::BudgetCheck(_) => "budget-check",
            Command::Predict(_) => "predict",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub videos: usize,
    #[arg(long, default_value_t = 25)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub d_video: usize,
    #[arg(long, default_value_t = 8)]
    pub d_audio: usize,
    #[arg(long, default_value_t = 30)]
    pub max_frames: usize,
    #[arg(long, default_value_t = 3.0)]
    pub mean_labels: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub train_out: PathBuf,
    #[arg(long)]
    pub validate_out: PathBuf,
    /// Fraction of videos placed in the validate side.
    #[arg(long, default_value_t = 0.2)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Video clusters.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Audio clusters; defaults to half the video clusters.
    #[arg(long)]
    pub k_audio: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub h: usize,
    #[arg(long, default_value_t = 5)]
    pub experts: usize,
    #[arg(long)]
    pub no_dummy_expert: bool,
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    #[arg(long, default_value_t = 100)]
    pub checkpoint_interval: u64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AverageArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(required = true)]
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Args)]
#[group(id = "model", required = true, multiple = false)]
pub struct ModelSource {
    #[arg(long, group = "model")]
    pub checkpoint: Option<PathBuf>,
    /// Ensemble manifest written by build-ensemble or tune-ensemble.
    #[arg(long, group = "model")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: ModelSource,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Tensor names to cast; defaults to the four largest model tensors.
    #[arg(long, value_delimiter = ',', conflicts_with = "top")]
    pub tensors: Vec<String>,
    /// Cast the N largest tensors instead of a named list.
    #[arg(long)]
    pub top: Option<usize>,
    /// Fail instead of saturating when a value overflows half precision.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct SizeReportArgs {
    /// Report the tensors stored in a checkpoint at their stored precision.
    #[arg(long, conflicts_with_all = ["k", "h", "paper_scale"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, required_unless_present = "checkpoint")]
    pub k: Option<usize>,
    #[arg(long, required_unless_present = "checkpoint")]
    pub h: Option<usize>,
    /// Use the full vocabulary and feature sizes with calibrated flags.
    #[arg(long)]
    pub paper_scale: bool,
    #[arg(long, default_value_t = 25)]
    pub vocab: usize,
    #[arg(long, default_value_t = 32)]
    pub d_video: usize,
    #[arg(long, default_value_t = 8)]
    pub d_audio: usize,
    /// Audio clusters as a fraction of video clusters.
    #[arg(long)]
    pub audio_ratio: Option<f64>,
    #[arg(long)]
    pub dummy_expert: Option<bool>,
    #[arg(long)]
    pub hidden_gate: Option<bool>,
    #[arg(long)]
    pub expert_width: Option<usize>,
    /// Write the report as JSON.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Write the calibration report as pretty JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SchemeKind {
    Coordinate,
    Bitmask,
}

#[derive(Debug, Args)]
pub struct SparsityArgs {
    #[arg(long)]
    pub params: u64,
    /// Fraction of weights pruned to zero.
    #[arg(long)]
    pub sparsity: f64,
    #[arg(long, default_value_t = 32)]
    pub value_bits: u32,
    #[arg(long, value_enum, default_value_t = SchemeKind::Coordinate)]
    pub scheme: SchemeKind,
    #[arg(long, default_value_t = 32)]
    pub index_bits: u32,
    #[arg(long, default_value_t = 2)]
    pub indices_per_nonzero: u32,
    #[arg(long, default_value_t = 1)]
    pub bits_per_flag: u32,
}

#[derive(Debug, Args)]
pub struct QuantizationArgs {
    #[arg(long, default_value_t = 32)]
    pub from: u32,
    #[arg(long)]
    pub to: u32,
}

#[derive(Debug, Args)]
pub struct BuildEnsembleArgs {
    /// Member checkpoint and coefficient as `PATH:COEFFICIENT`.
    #[arg(long = "member", required = true)]
    pub members: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub budget_bytes: Option<u64>,
    #[arg(long)]
    pub allow_unnormalized: bool,
}

#[derive(Debug, Args)]
pub struct TuneEnsembleArgs {
    /// Member checkpoint paths, 2 to 7 of them.
    #[arg(long = "member", required = true)]
    pub members: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub step: f64,
    #[arg(long, default_value_t = 20)]
    pub top_k: usize,
    #[arg(long)]
    pub budget_bytes: Option<u64>,
    /// Write the tuned ensemble manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BudgetCheckArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Override the budget recorded in the manifest.
    #[arg(long)]
    pub budget_bytes: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub source: ModelSource,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub top_k: usize,
}
