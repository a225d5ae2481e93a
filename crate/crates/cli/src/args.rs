use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gaitpt::{Condition, PartitionScheme};

#[derive(Debug, Parser)]
#[command(
    name = "gaitpt",
    version,
    about = "Train and evaluate GaitPT gait recognition models"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic walker dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint and epoch log.
    Train(TrainArgs),
    /// Embed sequences with a trained checkpoint.
    Embed(EmbedArgs),
    /// Score a checkpoint on a gallery and a probe file.
    Eval(EvalArgs),
    /// Train stage subsets repeatedly and compare them.
    Ablate(AblateArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train every limb-grouping scheme with shared seeds and compare them.
    PartitionStudy(PartitionArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub identities: usize,
    /// Sequences per identity and view.
    #[arg(long, default_value_t = 8)]
    pub sequences: usize,
    #[arg(long, value_delimiter = ',', default_value = "54,90")]
    pub views: Vec<i32>,
    #[arg(long, default_value_t = 60)]
    pub frames: usize,
    /// Conditions assigned round-robin to each identity's sequences.
    #[arg(long, value_delimiter = ',', default_value = "NM")]
    pub conditions: Vec<Condition>,
    /// Sequences per identity and view placed in the training split.
    #[arg(long, default_value_t = 4)]
    pub train_per_view: usize,
    /// Overrides every identity's jitter level.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest; the train split is used.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Active stages, e.g. 1,2,3,4 or 4.
    #[arg(long, value_delimiter = ',')]
    pub stages: Option<Vec<usize>>,
    #[arg(long)]
    pub scheme: Option<PartitionScheme>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epoch log path; defaults to the checkpoint path with a .log.json
    /// extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Sequence file (JSON lines).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output JSON-lines file of embeddings; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    /// Cross-view matrix with NM, BG and CL probe groups.
    Casia,
    /// Plain rank-K retrieval.
    Rankk,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum)]
    pub protocol: Protocol,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
    pub ks: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Stage subsets separated by '|'.
    #[arg(long, default_value = "4|1,4|1,2,4|1,2,3,4")]
    pub subsets: String,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelSize {
    /// Four frames, widths 8/16/32/64, one block, two heads.
    Tiny,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    pub size: ModelSize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Coordinates sampled per model tensor.
    #[arg(long, default_value_t = 8)]
    pub coords: usize,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
}
