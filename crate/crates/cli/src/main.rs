use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Exit status for malformed command lines (BSD `EX_USAGE`).
const EXIT_USAGE: u8 = 64;
const EXIT_VALIDATION: u8 = 1;
const EXIT_PARTIAL: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "bailaudit", version, about = "Audit vision-language models for bias in bail decisions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Clean raw case records into facts and assign the train/test split.
    Ingest(IngestArgs),
    /// Cross roster images with case facts.
    Pair(PairArgs),
    /// Annotate facts with offense types from a keyword lexicon.
    Tag(TagArgs),
    /// Ask a backend for candidate keywords for one offense type.
    ExpandLexicon(ExpandArgs),
    /// Build or query a precedent index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Query a model for every pair under one configuration.
    Predict(PredictArgs),
    /// Compute per-group metrics from a predictions file.
    Evaluate(EvaluateArgs),
    /// Write a supervised fine-tuning dataset and its manifest.
    ExportSft(ExportArgs),
    /// Assemble metrics files into the results table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Raw cases, JSONL with case_id, facts_and_arguments, bail_granted.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Legal stopword list, one entry per line (built-in list by default).
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Argument keyword list, one entry per line (built-in list by default).
    #[arg(long)]
    argument_keywords: Option<PathBuf>,
    /// Match argument keywords exactly instead of also matching inflections.
    #[arg(long)]
    exact_argument_match: bool,
    #[arg(long, default_value_t = bailaudit_core::corpus::DEFAULT_MIN_TOKEN_LENGTH)]
    min_tokens: usize,
    /// `whitespace` or `unicode-words`.
    #[arg(long, default_value = "whitespace")]
    tokenizer: String,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PairArgs {
    /// Image roster CSV (image_id, uri, race, gender, offense_types).
    #[arg(long)]
    roster: PathBuf,
    #[arg(long)]
    facts: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Comma-separated groups to keep.
    #[arg(long, value_delimiter = ',', default_value = "WM,BM,WF,BF")]
    groups: Vec<String>,
    /// Only emit pairs whose fact is in this split.
    #[arg(long, value_enum, default_value_t = SplitFilter::All)]
    split: SplitFilter,
    /// Keep at most this many images per fact, chosen by seeded hash.
    #[arg(long)]
    max_pairs_per_fact: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SplitFilter {
    Train,
    Test,
    All,
}

#[derive(Args, Debug)]
struct TagArgs {
    #[arg(long)]
    facts: PathBuf,
    /// Sectioned lexicon file, e.g. `crates/core/data/offense_lexicon.txt`.
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Also match regular inflections of lexicon words.
    #[arg(long)]
    stemming: bool,
    #[arg(long)]
    case_sensitive: bool,
}

#[derive(Args, Debug)]
struct ExpandArgs {
    /// Backend config JSON.
    #[arg(long)]
    backend: PathBuf,
    #[arg(long)]
    offense_type: String,
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Candidate list, one keyword per line.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Subcommand, Debug)]
enum IndexCommand {
    /// Embed the training facts and save the index.
    Build(IndexBuildArgs),
    /// Print the nearest precedents for a text or a case as JSON.
    Query(IndexQueryArgs),
}

#[derive(Args, Debug, Clone)]
struct EmbedderArgs {
    #[arg(long, value_enum, default_value_t = EmbedderKind::Hashing)]
    embedder: EmbedderKind,
    #[arg(long, default_value_t = bailaudit_core::retrieval::DEFAULT_DIMENSION)]
    dimension: usize,
    /// Embeddings endpoint for `--embedder http`.
    #[arg(long)]
    embedder_url: Option<String>,
    #[arg(long)]
    embedder_model: Option<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum EmbedderKind {
    Hashing,
    Http,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["facts", "typed"]))]
struct IndexBuildArgs {
    #[arg(long)]
    facts: Option<PathBuf>,
    /// Typed facts; the index then holds rendered typed text.
    #[arg(long)]
    typed: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    embedder: EmbedderArgs,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("query").required(true).args(["text", "case_id"]))]
struct IndexQueryArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    text: Option<String>,
    /// Look the query text up by case id in `--facts`/`--typed` or the index.
    #[arg(long)]
    case_id: Option<String>,
    #[arg(long)]
    facts: Option<PathBuf>,
    #[arg(long)]
    typed: Option<PathBuf>,
    #[arg(long, default_value_t = bailaudit_core::retrieval::DEFAULT_K)]
    k: usize,
    #[command(flatten)]
    embedder: EmbedderArgs,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// audit, audit-rag, ft-vanilla, ft-vanilla-rag or ft-typed-rag.
    #[arg(long)]
    config: String,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    facts: Option<PathBuf>,
    #[arg(long)]
    typed: Option<PathBuf>,
    #[arg(long)]
    roster: PathBuf,
    /// Backend config JSON (mock or http_chat).
    #[arg(long)]
    backend: PathBuf,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, default_value_t = bailaudit_core::retrieval::DEFAULT_K)]
    k: usize,
    /// Template directory (built-in templates by default).
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    decision_rules: Option<PathBuf>,
    /// Leave precedent outcomes out of the prompt.
    #[arg(long)]
    precedent_facts_only: bool,
    /// Do not ask for a confidence level.
    #[arg(long)]
    no_confidence: bool,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    /// JSONL checkpoint; finished pairs found here are not queried again.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = bailaudit_core::backend::DEFAULT_CHECKPOINT_EVERY)]
    checkpoint_every: usize,
    /// Only predict pairs from this split.
    #[arg(long, value_enum, default_value_t = SplitFilter::Test)]
    split: SplitFilter,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    embedder: EmbedderArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Count unparseable responses as denials instead of excluding them.
    #[arg(long)]
    unparseable_as_deny: bool,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    facts: PathBuf,
    #[arg(long)]
    typed: Option<PathBuf>,
    #[arg(long)]
    roster: PathBuf,
    /// `vanilla` or `typed`.
    #[arg(long, default_value = "vanilla")]
    scheme: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Lexicon used for tagging (required for the typed scheme); its hash
    /// goes into the dataset manifest.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Dataset manifest path (`<output>.sft.json` by default).
    #[arg(long)]
    manifest_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// One metrics file per configuration.
    #[arg(long, num_args = 1.., required = true)]
    metrics: Vec<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Also write the tab-delimited table here.
    #[arg(long)]
    table: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();

    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(partial) = e.downcast_ref::<commands::PartialFailure>() {
                eprintln!("warning: {partial}");
                return ExitCode::from(EXIT_PARTIAL);
            }
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_VALIDATION)
        }
    }
}
