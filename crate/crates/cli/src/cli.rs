use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use coto_core::merge::MergeMode;
use coto_core::LossKind;

#[derive(Debug, Parser)]
#[command(name = "coto-lab", version, about = "Progressive stochastic adapter training laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run and write checkpoints, metrics and a config copy.
    Train(TrainArgs),
    /// Evaluate the interpolation path between two checkpoints.
    Interpolate(InterpolateArgs),
    /// Merge two checkpoints at one interpolation weight.
    Merge(MergeArgs),
    /// Evaluate structured or magnitude pruning of a checkpoint.
    Prune(PruneArgs),
    /// Attribute the loss reduction to individual adapters.
    Shapley(ShapleyArgs),
    /// Check the subnetwork bound by exhaustive mask enumeration.
    VerifyBound(VerifyBoundArgs),
    /// Mean per-layer Euclidean distances between adapter sets.
    Distances(DistancesArgs),
    /// Run a pinned multi-seed reproduction and write a verdict.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; defaults to `<output_dir>/seed-<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Fusion,
    Ensemble,
    Aligned,
}

impl From<ModeArg> for MergeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fusion => MergeMode::Fusion,
            ModeArg::Ensemble => MergeMode::Ensemble,
            ModeArg::Aligned => MergeMode::AlignedFusion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Mse,
    CrossEntropy,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Mse => LossKind::Mse,
            LossArg::CrossEntropy => LossKind::SoftmaxCrossEntropy,
        }
    }
}

#[derive(Debug, Args)]
pub struct PairArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Run config supplying the evaluation data; defaults to `config.json` beside `--a`.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    /// Number of evenly spaced λ values in [0, 1].
    #[arg(long, default_value_t = 11)]
    pub grid: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Fusion)]
    pub mode: ModeArg,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::Fusion)]
    pub mode: ModeArg,
    /// Weight of `--a`.
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Structured pattern: every-other, low:K, middle:K, high:K, all, custom:1010..
    #[arg(long = "pattern")]
    pub patterns: Vec<String>,
    /// Comma-separated global sparsity fractions.
    #[arg(long, value_delimiter = ',')]
    pub sparsity_grid: Vec<f64>,
    /// Rank magnitudes within each layer instead of globally.
    #[arg(long)]
    pub per_layer: bool,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Exact,
    Multilinear,
}

#[derive(Debug, Args)]
pub struct ShapleyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::Multilinear)]
    pub method: MethodArg,
    #[arg(long, default_value_t = 11)]
    pub p_grid: usize,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Contiguous layer groups in the concentration summary.
    #[arg(long, default_value_t = 3)]
    pub buckets: usize,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyBoundArgs {
    #[arg(long, conflicts_with = "random_model", required_unless_present = "random_model")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Depth of a random model on a small synthetic task.
    #[arg(long)]
    pub random_model: Option<usize>,
    #[arg(long, default_value_t = 11)]
    pub p_grid: usize,
    /// Evaluation rows used for the check.
    #[arg(long, default_value_t = 32)]
    pub rows: usize,
    #[arg(long, value_enum, default_value_t = LossArg::CrossEntropy)]
    pub loss: LossArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistancesArgs {
    #[arg(long, num_args = 2.., required = true)]
    pub ckpts: Vec<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Figure {
    Fig2,
    Fig7,
    Fig8,
    #[value(name = "fig9-left")]
    Fig9Left,
    Tab5,
    Tab8,
}

impl Figure {
    pub fn name(self) -> &'static str {
        match self {
            Figure::Fig2 => "fig2",
            Figure::Fig7 => "fig7",
            Figure::Fig8 => "fig8",
            Figure::Fig9Left => "fig9-left",
            Figure::Tab5 => "tab5",
            Figure::Tab8 => "tab8",
        }
    }
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    #[arg(long, value_enum)]
    pub figure: Figure,
    /// Defaults to the pinned reference config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, default_value = "reproduce")]
    pub out: PathBuf,
}
