use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mcar::corpus::SplitName;

/// Explicit-lyrics classifier pipeline over a single data directory.
///
/// Settings resolve in the order flags, then environment, then the
/// `--config` TOML file, then built-in defaults.
#[derive(Debug, Parser)]
#[command(name = "mcar", version, arg_required_else_help = true)]
pub struct Cli {
    /// Root of the data directory shared with the service.
    #[arg(long, global = true, env = "MCAR_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,

    /// Seed for every random stream; fixes all outputs given the same inputs.
    #[arg(long, global = true, env = "MCAR_SEED")]
    pub seed: Option<u64>,

    /// Pipeline configuration file (TOML).
    #[arg(long, global = true, env = "MCAR_CONFIG")]
    pub config: Option<PathBuf>,

    /// Log more to stderr; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic planted-keyword corpus and its four splits.
    GenCorpus(GenCorpusArgs),
    /// Pretrain the language model on the training split's lyrics.
    Pretrain(TrainArgs),
    /// Fine-tune the classifier on the training split plus ledger replay.
    Train(TrainArgs),
    /// Evaluate the model on a split, or score a predictions file.
    Eval(EvalArgs),
    /// Harvest errors into the feedback ledger, refine, and evaluate on a fresh split.
    FeedbackRun(FeedbackArgs),
    /// Compare the model against the baseline classifier with McNemar's test.
    Compare(CompareArgs),
    /// Rate lyrics into an age tier with content descriptors.
    Rate(RateArgs),
    /// Print the explicit-content probability for lyrics.
    Classify(ClassifyArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Render the text and CSV report from recorded metrics.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    EvalPre,
    EvalPost,
    Comparison,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitName::Train,
            SplitArg::EvalPre => SplitName::EvalPre,
            SplitArg::EvalPost => SplitName::EvalPost,
            SplitArg::Comparison => SplitName::Comparison,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RecordSlot {
    Pre,
    Post,
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Number of explicit songs.
    #[arg(long)]
    pub explicit: Option<usize>,
    /// Number of non-explicit songs.
    #[arg(long)]
    pub clean: Option<usize>,
    /// Training split size.
    #[arg(long)]
    pub train: Option<usize>,
    /// Pre-feedback evaluation split size.
    #[arg(long)]
    pub eval_pre: Option<usize>,
    /// Post-feedback evaluation split size.
    #[arg(long)]
    pub eval_post: Option<usize>,
    /// Baseline comparison split size.
    #[arg(long)]
    pub comparison: Option<usize>,
    /// Share of explicit songs carrying the benign marker line.
    #[arg(long)]
    pub marker_rate_explicit: Option<f64>,
    /// Share of non-explicit songs carrying the benign marker line.
    #[arg(long)]
    pub marker_rate_clean: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Maximum epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Minibatch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Split to evaluate.
    #[arg(long, value_enum, default_value = "eval-pre")]
    pub split: SplitArg,
    /// Checkpoint to evaluate instead of the data directory's model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Vocabulary for `--model`; defaults to the data directory's.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Score a song_id,expert,probability CSV instead of running a model.
    #[arg(long, conflicts_with_all = ["model", "vocab"])]
    pub predictions: Option<PathBuf>,
    /// Write per-song probabilities to this CSV.
    #[arg(long)]
    pub write_predictions: Option<PathBuf>,
    /// Decision threshold.
    #[arg(long, env = "MCAR_THRESHOLD")]
    pub threshold: Option<f64>,
    /// Store the result as the pre- or post-feedback entry of metrics.json.
    #[arg(long, value_enum)]
    pub record: Option<RecordSlot>,
    /// Print the confusion matrix and metrics as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct FeedbackArgs {
    /// Replay multiplier for false positives.
    #[arg(long)]
    pub fp_weight: Option<f64>,
    /// Replay multiplier for false negatives.
    #[arg(long)]
    pub fn_weight: Option<f64>,
    /// Maximum refinement epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Refinement learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decision threshold.
    #[arg(long, env = "MCAR_THRESHOLD")]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Split to compare on.
    #[arg(long, value_enum, default_value = "comparison")]
    pub split: SplitArg,
    /// Predictions CSV for the first model; requires `--predictions-b`.
    #[arg(long, requires = "predictions_b")]
    pub predictions_a: Option<PathBuf>,
    /// Predictions CSV for the second model.
    #[arg(long, requires = "predictions_a")]
    pub predictions_b: Option<PathBuf>,
    /// Query the live endpoint from MCAR_REMOTE_* instead of the offline mock.
    #[arg(long)]
    pub remote: bool,
    /// Keyword the offline mock treats as explicit; repeatable.
    #[arg(long = "mock-keyword", default_values_t = vec!["bellaqueo".to_string()])]
    pub mock_keywords: Vec<String>,
    /// Append every remote request and raw response to the audit log.
    #[arg(long)]
    pub log_remote: bool,
    /// Significance level.
    #[arg(long, default_value_t = mcar::evaluation::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Decision threshold.
    #[arg(long, env = "MCAR_THRESHOLD")]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LyricsInput {
    /// Lyrics text.
    #[arg(long, conflicts_with_all = ["file", "song_id"])]
    pub lyrics: Option<String>,
    /// Read lyrics from a file.
    #[arg(long, conflicts_with = "song_id")]
    pub file: Option<PathBuf>,
    /// Use a song from the corpus.
    #[arg(long)]
    pub song_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct RateArgs {
    #[command(flatten)]
    pub input: LyricsInput,
    /// Threshold table (TOML); defaults to the data directory's or built-ins.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub input: LyricsInput,
    /// Decision threshold.
    #[arg(long, env = "MCAR_THRESHOLD")]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Address to bind.
    #[arg(long, env = "MCAR_HOST", default_value = "127.0.0.1")]
    pub host: String,
    /// Port to bind.
    #[arg(long, env = "MCAR_PORT", default_value_t = 8080)]
    pub port: u16,
    /// Bearer token for moderator endpoints; without it they are disabled.
    #[arg(long, env = "MCAR_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    /// Serve static console assets from this directory.
    #[arg(long, env = "MCAR_STATIC_DIR")]
    pub static_dir: Option<PathBuf>,
    /// Decision threshold.
    #[arg(long, env = "MCAR_THRESHOLD")]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory; defaults to `<data-dir>/reports`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
