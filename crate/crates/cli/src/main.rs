use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Language-guided video summarization on precomputed embeddings.
#[derive(Debug, Parser)]
#[command(name = "sumkit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset (features, ground truth, manifest).
    GenSynthetic(GenSyntheticArgs),
    /// Train a model on a manifest and save a checkpoint.
    Train(TrainArgs),
    /// Per-frame importance scores for one video.
    Score(ScoreArgs),
    /// Budgeted keyshot summary for one video.
    Summarize(SummarizeArgs),
    /// F1 / Kendall / Spearman against a manifest's ground truth.
    Evaluate(EvaluateArgs),
    /// Validate feature files and print their headers.
    InspectFeatures(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Supervised,
    Unsupervised,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TextModeArg {
    /// Captions are fused and attended to.
    Generic,
    /// A single query embedding is attended to.
    Query,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AggregationArg {
    Avg,
    Max,
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    /// Existing directory to write into.
    #[arg(long, required_unless_present = "show_config")]
    pub out: Option<PathBuf>,
    /// JSON file with generator settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Falls back to the config file, then `SUMKIT_SEED`, then the default.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub topics: Option<usize>,
    #[arg(long)]
    pub distractor_fraction: Option<f64>,
    /// Two-topic videos, each listed once per topic query.
    #[arg(long)]
    pub query_pairs: bool,
    /// Print the resolved generator settings and exit.
    #[arg(long)]
    pub show_config: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, required_unless_present = "show_config")]
    pub manifest: Option<PathBuf>,
    /// Checkpoint path to write.
    #[arg(long, required_unless_present = "show_config")]
    pub out: Option<PathBuf>,
    /// Only train on entries with this split tag.
    #[arg(long)]
    pub split: Option<String>,
    /// Per-epoch loss log (JSON).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunFlags,
    /// Print the resolved run config and exit.
    #[arg(long)]
    pub show_config: bool,
}

/// Run-config overrides shared by commands that build a [`sumkit::RunConfig`].
#[derive(Debug, Args)]
pub struct RunFlags {
    /// JSON run config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub text_mode: Option<TextModeArg>,
    /// Falls back to the config file, then `SUMKIT_SEED`, then the default.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub window_len: Option<usize>,
    #[arg(long)]
    pub enc_layers: Option<usize>,
    #[arg(long)]
    pub dec_layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub lga_heads: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub beta: Option<f32>,
    #[arg(long)]
    pub lambda: Option<f32>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub frames: PathBuf,
    /// Caption or query feature file; the mode follows the file's kind.
    #[arg(long)]
    pub text: PathBuf,
    /// Output JSON; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub frames: PathBuf,
    /// Caption feature file (generic mode).
    #[arg(long, conflicts_with = "query", required_unless_present = "query")]
    pub captions: Option<PathBuf>,
    /// Query feature file (query-focused mode).
    #[arg(long)]
    pub query: Option<PathBuf>,
    /// Fraction of frames the summary may use; the checkpoint's value when absent.
    #[arg(long)]
    pub budget: Option<f64>,
    /// JSON array of shot boundaries (starts plus the frame count);
    /// uniform shots when absent.
    #[arg(long)]
    pub shots: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Score videos with this checkpoint.
    #[arg(long, conflicts_with = "scores", required_unless_present = "scores")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<video_id>.scores.json` files written by `score`.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub budget: Option<f64>,
    /// Overrides the manifest's aggregation over references.
    #[arg(long, value_enum)]
    pub aggregation: Option<AggregationArg>,
    /// Report JSON; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write per-video rows as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    /// One JSON object per file instead of text.
    #[arg(long)]
    pub json: bool,
}

/// Configuration and usage problems exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    use sumkit::Error as E;
    match err.downcast_ref::<E>() {
        Some(
            E::Config(_)
            | E::Usage(_)
            | E::Validation(_)
            | E::Format { .. }
            | E::Json { .. }
            | E::Shape(_),
        ) => 2,
        Some(E::Io { .. } | E::Numeric { .. }) => 1,
        None if err.downcast_ref::<commands::UsageError>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(a),
        Command::Train(a) => commands::train(a),
        Command::Score(a) => commands::score(a),
        Command::Summarize(a) => commands::summarize(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::InspectFeatures(a) => commands::inspect_features(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        // a closed stdout (e.g. piped into `head`) is not a failure
        Err(e)
            if e.chain().any(|c| {
                c.downcast_ref::<std::io::Error>()
                    .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
            }) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
