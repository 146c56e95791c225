use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sdpo_core::train::{DEFAULT_BATCH_SIZE, DEFAULT_BETA, DEFAULT_EPOCHS, DEFAULT_K_PERCENT, DEFAULT_LR};
use sdpo_core::{InitSpec, Objective, ReferenceSpec};

#[derive(Debug, Parser)]
#[command(
    name = "sdpo",
    version,
    about = "Token-selective preference optimization on bigram policies"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an annotated preference corpus and its oracle policy
    GenData(GenDataArgs),
    /// Train a policy with sft, dpo or selective_dpo
    Train(TrainArgs),
    /// Held-out preference accuracy and selection quality of a checkpoint
    Eval(EvalArgs),
    /// Train and evaluate one cell per top-k and per beta value
    Sweep(SweepArgs),
    /// Compare analytic gradients with central finite differences
    GradCheck(GradCheckArgs),
    /// Dump per-token alignment scores and the selection mask of one pair
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 32)]
    pub vocab: usize,
    #[arg(long, default_value_t = 2048)]
    pub pairs: usize,
    #[arg(long, default_value_t = 4)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 16)]
    pub resp_len: usize,
    /// Preference-carrying substitutions per rejected response
    #[arg(long, default_value_t = 3)]
    pub divergent: usize,
    /// Neutral substitutions per response side
    #[arg(long, default_value_t = 2)]
    pub noise: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub oracle_out: PathBuf,
}

/// Training options shared by `train` and `sweep`.
#[derive(Debug, Args)]
pub struct CommonTrainArgs {
    /// Flat TOML file of training keys; explicit flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// sft | dpo | selective_dpo
    #[arg(long, default_value = "selective_dpo")]
    pub objective: Objective,
    /// sgd | adam
    #[arg(long, default_value = "sgd")]
    pub optimizer: String,
    #[arg(long, default_value_t = DEFAULT_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = DEFAULT_EPOCHS, conflicts_with = "steps")]
    pub epochs: usize,
    /// Fixed number of optimizer steps instead of epochs
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
    /// Seed for batch shuffling
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// init | oracle:PATH | checkpoint:PATH
    #[arg(long = "ref", default_value = "init")]
    pub reference: ReferenceSpec,
    /// zeros | random[:SCALE[:SEED]] | checkpoint:PATH
    #[arg(long, default_value = "zeros")]
    pub init: InitSpec,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonTrainArgs,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    /// Percentage of a pair's response tokens kept by selective_dpo
    #[arg(long = "top-k", default_value_t = DEFAULT_K_PERCENT)]
    pub top_k: f64,
    /// Checkpoint path
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-step metrics (JSONL)
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonTrainArgs,
    /// Top-k percentages, comma separated
    #[arg(long = "k", value_delimiter = ',')]
    pub k_values: Vec<f64>,
    /// Beta values, comma separated
    #[arg(long = "beta", value_delimiter = ',')]
    pub beta_values: Vec<f64>,
    /// Beta held fixed along the top-k axis
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub fixed_beta: f64,
    /// Top-k held fixed along the beta axis
    #[arg(long, default_value_t = DEFAULT_K_PERCENT)]
    pub fixed_k: f64,
    #[arg(long, default_value_t = 0.1)]
    pub heldout: f64,
    #[arg(long, default_value_t = 1)]
    pub split_seed: u64,
    /// Machine-readable report (JSONL)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Policy and reference selection for the read-only commands.
#[derive(Debug, Args)]
pub struct PolicyArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Policy under test: zeros | random[:SCALE[:SEED]] | checkpoint:PATH
    #[arg(long, default_value = "zeros")]
    pub policy: InitSpec,
    /// init | oracle:PATH | checkpoint:PATH; `init` is the starting policy given by --init
    #[arg(long = "ref", default_value = "init")]
    pub reference: ReferenceSpec,
    #[arg(long, default_value = "zeros")]
    pub init: InitSpec,
    #[arg(long = "top-k", default_value_t = DEFAULT_K_PERCENT)]
    pub top_k: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    /// Also write the report here (JSON)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long, default_value = "selective_dpo")]
    pub objective: Objective,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    /// Number of leading pairs to check
    #[arg(long, default_value_t = 10)]
    pub pairs: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub epsilon: f64,
    /// Largest accepted relative error
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Pair index (zero-based)
    #[arg(long)]
    pub pair: usize,
    /// Write the dump here instead of standard output
    #[arg(long)]
    pub out: Option<PathBuf>,
}
