//! `prefalign`: the preference pipeline as subcommands.
//!
//! Machine-readable output goes to stdout as JSON or JSONL; progress and
//! warnings go to stderr. Exit status is 0 on success, 1 on data violations
//! or runtime errors and 2 on usage errors.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "prefalign", version, about = "Human-preference datasets, scores, metrics, adapter training and curation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract preference instances from a chat export.
    Ingest(IngestArgs),
    /// Check dataset invariants; exits 1 if any instance violates them.
    Validate(DatasetArg),
    /// Prompt and image counts, user counts and the random-guess baseline.
    Stats(StatsArgs),
    /// Split a dataset by prompt into train and validation files.
    Split(SplitArgs),
    /// Per-image HPS, CLIP score and optional aesthetic score.
    Score(ScoreArgs),
    /// Preference-prediction accuracy of a scorer or a prediction file.
    EvalAccuracy(EvalArgs),
    /// Agreement between raters and, optionally, a model.
    Agreement(AgreementArgs),
    /// Inception Score from class probabilities.
    Is(IsArgs),
    /// Fréchet distance between two feature sets.
    Fid(FidArgs),
    /// IS and FID for preferred versus non-preferred images.
    SplitMetrics(SplitMetricsArgs),
    /// Train a low-rank preference adapter over frozen embeddings.
    TrainAdapter(TrainArgs),
    /// Build a preference-tagged fine-tuning manifest from scored images.
    Curate(CurateArgs),
    /// Run the pairwise user-study HTTP service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct DatasetArg {
    /// Dataset JSONL.
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Args, Debug)]
struct EmbeddingArgs {
    /// EMB1 image embeddings keyed by image id.
    #[arg(long)]
    emb_images: PathBuf,
    /// EMB1 text embeddings keyed by prompt id.
    #[arg(long)]
    emb_texts: PathBuf,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Chat export JSON.
    #[arg(long)]
    export: PathBuf,
    /// Dataset JSONL to write; without it the dataset goes to stdout and the summary to stderr.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Hex key for user-id anonymization. A random key is used when absent.
    #[arg(long, env = "PREFALIGN_ANON_KEY", hide_env_values = true)]
    key: Option<String>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long, required_unless_present = "composition", conflicts_with = "composition")]
    dataset: Option<PathBuf>,
    /// Counts per image number instead of a dataset, e.g. `4:23722,3:953,2:530`.
    #[arg(long, value_delimiter = ',', value_parser = parse_composition)]
    composition: Option<Vec<(usize, usize)>>,
}

fn parse_composition(s: &str) -> Result<(usize, usize), String> {
    let (n, c) = s.split_once(':').ok_or_else(|| format!("expected n:count, got {s:?}"))?;
    Ok((n.trim().parse().map_err(|e| format!("{e}"))?, c.trim().parse().map_err(|e| format!("{e}"))?))
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Strategy {
    Uniform,
    Stratified,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of prompts in the validation half.
    #[arg(long)]
    val_size: usize,
    #[arg(long, value_enum, default_value_t = Strategy::Uniform)]
    strategy: Strategy,
    #[arg(long)]
    out_train: PathBuf,
    #[arg(long)]
    out_val: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    emb: EmbeddingArgs,
    /// MLP1 aesthetic-head weights.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Scored JSONL to write instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Scorer {
    Hps,
    Clip,
    Aesthetic,
    Adapter,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Choice JSONL (`{rater_id, key, choice}`) to evaluate instead of a scorer.
    #[arg(long, conflicts_with_all = ["scorer", "emb_images", "emb_texts"])]
    predictions: Option<PathBuf>,
    /// Rater to take from the prediction file; the first one by default.
    #[arg(long, requires = "predictions")]
    rater: Option<String>,
    #[arg(long, value_enum)]
    scorer: Option<Scorer>,
    #[arg(long)]
    emb_images: Option<PathBuf>,
    #[arg(long)]
    emb_texts: Option<PathBuf>,
    /// MLP1 weights for the aesthetic scorer.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// ADP1 adapter for the adapter scorer.
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Also write the scorer's choices as JSONL.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AgreementArgs {
    /// Choice JSONL holding every rater's picks.
    #[arg(long)]
    choices: PathBuf,
    /// Rater id in `--choices` to treat as the model rather than a panel member.
    #[arg(long, conflicts_with = "model")]
    model_rater: Option<String>,
    /// Separate choice JSONL with a single model rater.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IsArgs {
    /// EMB1 file of class-probability rows.
    #[arg(long)]
    probs: PathBuf,
    #[arg(long, default_value_t = prefalign_core::gen_metrics::DEFAULT_SPLITS)]
    splits: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct FidArgs {
    /// EMB1 features of the first set.
    #[arg(long)]
    a: PathBuf,
    /// EMB1 features of the second set.
    #[arg(long)]
    b: PathBuf,
}

#[derive(Args, Debug)]
struct SplitMetricsArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// EMB1 class probabilities keyed by image id.
    #[arg(long)]
    probs: PathBuf,
    /// EMB1 features keyed by image id.
    #[arg(long)]
    features: PathBuf,
    /// EMB1 reference features.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, default_value_t = prefalign_core::gen_metrics::DEFAULT_SPLITS)]
    splits: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset JSONL.
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    emb: EmbeddingArgs,
    /// Validation dataset JSONL.
    #[arg(long, conflicts_with = "val_size")]
    val: Option<PathBuf>,
    /// Carve this many validation prompts out of `--dataset` with `--seed`.
    #[arg(long)]
    val_size: Option<usize>,
    #[arg(long, default_value_t = 1.7e-2)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    batch_size: usize,
    #[arg(long, default_value_t = 3.1e-3)]
    weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    rank: usize,
    #[arg(long, default_value_t = 100.0)]
    logit_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop once validation accuracy reaches this value.
    #[arg(long)]
    stop_at: Option<f64>,
    /// ADP1 output file.
    #[arg(long)]
    out: PathBuf,
    /// Per-step `step,lr,loss` CSV.
    #[arg(long)]
    history_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CurateArgs {
    /// Scored-items JSONL (`{prompt, image_id, hps}`).
    #[arg(long)]
    scored: PathBuf,
    /// Regularization manifest JSONL (`{image_id, caption}`), already filtered.
    #[arg(long)]
    regularization: Option<PathBuf>,
    #[arg(long, default_value_t = prefalign_core::curation::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value = prefalign_core::curation::DEFAULT_IDENTIFIER)]
    identifier: String,
    /// Manifest JSONL to write; without it the manifest goes to stdout and the summary to stderr.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, env = "PREFALIGN_HOST", default_value = "127.0.0.1")]
    host: String,
    /// 0 picks a free port.
    #[arg(long, env = "PREFALIGN_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "PREFALIGN_DATA_DIR", default_value = "study-data")]
    data_dir: PathBuf,
    #[arg(long, env = "PREFALIGN_IMAGE_DIR", default_value = "images")]
    image_dir: PathBuf,
}

/// Outcome of a subcommand that ran to completion.
pub enum Outcome {
    Ok,
    /// The input violated the data contract; the report is already printed.
    Violations,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("PREFALIGN_LOG").unwrap_or_else(|_| "info".into()))
        .init();
    match commands::run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Violations) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
