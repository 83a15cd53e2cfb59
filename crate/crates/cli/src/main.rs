//! `lstmformer`: scene simulation, alignment, embedding, training,
//! separation, evaluation and model accounting from one executable.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lstmformer::model::Variant;
use lstmformer::scene::Split;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  usage or configuration error
  2  data error (unreadable, malformed or degenerate input)
  3  numerical failure (non-finite values, divergence)";

#[derive(Parser, Debug)]
#[command(name = "lstmformer", version, about = "Target speaker separation with LSTMFormer", after_help = EXIT_CODES)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic clean-speech corpus (speaker folders of WAVs).
    Corpus(CorpusArgs),
    /// Render two-speaker dual-microphone scenes and write a manifest.
    Simulate(SimulateArgs),
    /// Estimate truth/mixture delays with GCC-PHAT and report them.
    Align(AlignArgs),
    /// Compute speaker embeddings for every scene into a cache.
    Embed(EmbedArgs),
    /// Train a model; writes best.ckpt, last.ckpt and train_log.jsonl.
    Train(TrainArgs),
    /// Extract the target speaker from one mixture.
    Separate(SeparateArgs),
    /// Score a checkpoint on a manifest split (Before/After/Improved SDR).
    Evaluate(EvaluateArgs),
    /// Print parameter count and MACs for 1 s of input.
    Inspect(InspectArgs),
    /// Write a training configuration preset.
    Init(InitArgs),
}

#[derive(Args, Debug)]
pub struct CorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub speakers: usize,
    #[arg(long, default_value_t = 8)]
    pub utterances: usize,
    #[arg(long, default_value_t = 1.8)]
    pub min_seconds: f64,
    #[arg(long, default_value_t = 2.6)]
    pub max_seconds: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Directory of speaker subdirectories holding mono WAVs.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Total scenes, split 3:1:1 into train/valid/test unless overridden.
    #[arg(long, default_value_t = 100)]
    pub scenes: usize,
    #[arg(long)]
    pub valid_scenes: Option<usize>,
    #[arg(long)]
    pub test_scenes: Option<usize>,
    /// JSON simulation settings (room, T60, SIR and delay ranges).
    #[arg(long)]
    pub sim: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AlignArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSONL output, one row per scene.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = lstmformer::alignment::DEFAULT_MAX_LAG)]
    pub max_lag: usize,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output stem; writes `<stem>.bin` and `<stem>.json`.
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long, default_value_t = lstmformer::embedding::EMBEDDING_DIM)]
    pub dim: usize,
    /// Skip the background statistics fitted on the train split.
    #[arg(long)]
    pub no_background: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Manifest whose train-split records are used for training.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Manifest whose valid-split records drive early stopping
    /// (defaults to --manifest).
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// TrainConfig JSON (see `init`).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `<out>/last.ckpt`.
    #[arg(long)]
    pub resume: bool,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Embedding cache from `embed`; its background is reused.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub no_background: bool,
    #[arg(long, default_value_t = 1)]
    pub checkpoint_every: usize,
    /// Stop after this many completed epochs, as if interrupted.
    #[arg(long)]
    pub halt_after: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SeparateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Stereo for dual models; single models use the first channel.
    #[arg(long)]
    pub mix: PathBuf,
    /// Mono enrollment utterance of the target speaker.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSONL output: one row per scene, then the aggregate row.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    pub split: Split,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// TrainConfig or ModelConfig JSON.
    #[arg(long, conflicts_with = "variant", required_unless_present = "variant")]
    pub config: Option<PathBuf>,
    /// Inspect a built-in preset instead of a file.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long, default_value_t = 1.0)]
    pub seconds: f64,
    /// Print one JSON object instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long, value_parser = parse_variant)]
    pub variant: Variant,
    #[arg(long)]
    pub out: PathBuf,
    /// Narrow model with every hidden width set to this value.
    #[arg(long)]
    pub micro: Option<usize>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: lstmformer::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}` (train, valid, test)")),
    }
}

/// Maps a library error onto the exit-code contract.
fn exit_code(e: &lstmformer::Error) -> u8 {
    if e.is_numerical() {
        3
    } else if e.is_data_error() || matches!(e, lstmformer::Error::VariantMismatch(_)) {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
