use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod adapt;
mod common;
mod eval;
mod gradcheck;
mod pretrain;
mod synth;
mod zeroshot;

#[derive(Parser)]
#[command(name = "ekclip", version, about = "Category-aware vision-language alignment on precomputed features")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
pub struct GlobalArgs {
    /// Seed for every random draw; overrides the seed in a config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parameter storage precision; overrides the config file.
    #[arg(long, global = true, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

/// Text feature source shared by the commands that embed prompts.
#[derive(Args, Clone)]
pub struct TextArgs {
    /// Precomputed text features, one row per prompt in --text-index.
    #[arg(long, requires = "text_index")]
    pub text_emb: Option<PathBuf>,
    /// JSON array of prompt strings aligned with --text-emb rows.
    #[arg(long, requires = "text_emb")]
    pub text_index: Option<PathBuf>,
    /// Dimension of the built-in surrogate featurizer.
    #[arg(long, default_value_t = 64)]
    pub text_dim: usize,
    /// Hash seed of the built-in surrogate featurizer.
    #[arg(long, default_value_t = 0)]
    pub text_seed: u64,
}

/// Dataset inputs shared by most commands.
#[derive(Args, Clone)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub image_emb: PathBuf,
    /// Prompt bank JSON (default: the built-in expert-knowledge bank).
    #[arg(long)]
    pub prompt_bank: Option<PathBuf>,
    /// Category registry JSON (default: the built-in registry).
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the projection heads and temperature.
    Pretrain(pretrain::PretrainArgs),
    /// Classify images against text prototypes.
    Zeroshot(zeroshot::ZeroshotArgs),
    /// Fit a few-shot adapter per fold and predict the held-out split.
    Adapt(adapt::AdaptArgs),
    /// Score a predictions file against manifest labels.
    Eval(eval::EvalArgs),
    /// Compare analytic and finite-difference gradients on random batches.
    Gradcheck(gradcheck::GradcheckArgs),
    /// Generate a synthetic dataset with matching text features.
    Synth(synth::SynthArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Pretrain(a) => pretrain::run(&cli.global, a),
        Command::Zeroshot(a) => zeroshot::run(&cli.global, a),
        Command::Adapt(a) => adapt::run(&cli.global, a),
        Command::Eval(a) => eval::run(&cli.global, a),
        Command::Gradcheck(a) => gradcheck::run(&cli.global, a),
        Command::Synth(a) => synth::run(&cli.global, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
