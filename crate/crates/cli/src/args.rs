use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "star", version, about = "Training-free sequential recommendation pipeline")]
#[command(arg_required_else_help = true, propagate_version = true)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// More log output (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter raw reviews to a k-core, split leave-one-out and write the dataset.
    Prepare(PrepareArgs),
    /// Embed item metadata prompts, reusing the embedding cache.
    Embed(EmbedArgs),
    /// Build the semantic similarity matrix from the item embeddings.
    BuildSemantic(SemanticArgs),
    /// Build the interaction counts and the collaborative similarity matrix.
    BuildCollab(CollabArgs),
    /// Score the catalog for every user and keep the top candidates.
    Retrieve(RetrieveArgs),
    /// Rerank retrieved candidates with a chat model or a mock ranker.
    Rank(RankArgs),
    /// Compute HR@K and NDCG@K of a run file.
    Evaluate(EvaluateArgs),
    /// Print user, item and interaction counts of a prepared dataset.
    Stats(StatsArgs),
    /// Run every configuration of a parameter grid end to end.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct RootArg {
    /// Working directory holding dataset/, embeddings/ and matrices/.
    #[arg(long, value_name = "DIR")]
    pub root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Review dump, one JSON object per line (.gz accepted).
    #[arg(long, value_name = "FILE")]
    pub reviews: PathBuf,
    /// Item metadata dump (.gz accepted).
    #[arg(long, value_name = "FILE")]
    pub meta: Option<PathBuf>,
    /// Working directory to create.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub kcore: usize,
    #[arg(long, value_enum, default_value = "fixpoint")]
    pub kcore_mode: KcoreModeArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KcoreModeArg {
    Fixpoint,
    SinglePass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderArg {
    Local,
    Http,
}

#[derive(Debug, Args)]
pub struct EndpointArgs {
    /// Endpoint URL of a remote provider.
    #[arg(long)]
    pub url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API token.
    #[arg(long, value_name = "VAR")]
    pub token_env: Option<String>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub root: RootArg,
    #[arg(long, value_enum)]
    pub provider: Option<ProviderArg>,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    /// Seed of the local embedder.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dimension of the local embedder.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Concurrent provider requests.
    #[arg(long)]
    pub fan_out: Option<usize>,
    /// Maximum prompt length in characters.
    #[arg(long, default_value_t = star_core::embed::DEFAULT_PROMPT_BUDGET)]
    pub prompt_budget: usize,
}

#[derive(Debug, Args)]
pub struct SemanticArgs {
    #[command(flatten)]
    pub root: RootArg,
    /// Keep only the K most similar items per row.
    #[arg(long, value_name = "K")]
    pub topk: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CollabArgs {
    #[command(flatten)]
    pub root: RootArg,
    /// Interactions that feed the counts: train or train-validation.
    #[arg(long, visible_alias = "count-split", value_name = "SPLIT")]
    pub counts: Option<String>,
}

#[derive(Debug, Args)]
pub struct RetrievalFlags {
    /// Weight of the semantic matrix (collaborative gets 1 - a).
    #[arg(long)]
    pub a: Option<f64>,
    /// Recency decay base.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Number of recent history items scored against, or `all`.
    #[arg(long, value_name = "N|all")]
    pub history: Option<String>,
    /// Candidates kept per user.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub use_ratings: bool,
    /// Shuffle each candidate list with this seed.
    #[arg(long, value_name = "SEED")]
    pub shuffle: Option<u64>,
    /// Allow items from the user's history among the candidates.
    #[arg(long)]
    pub include_seen: bool,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub root: RootArg,
    #[command(flatten)]
    pub retrieval: RetrievalFlags,
    /// Output run file [default: <root>/runs/retrieval.jsonl].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Selection,
    Point,
    Window,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RankerArg {
    Http,
    Oracle,
    Lexical,
    Noisy,
    Identity,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub root: RootArg,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Window size.
    #[arg(long)]
    pub w: Option<usize>,
    /// Window stride.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub passes: Option<usize>,
    /// Items chosen by the selection strategy.
    #[arg(long)]
    pub k_out: Option<usize>,
    #[arg(long, value_enum)]
    pub ranker: Option<RankerArg>,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Flip probability of the noisy mock ranker.
    #[arg(long, value_name = "P")]
    pub noise: Option<f64>,
    /// Seed of the noisy mock ranker.
    #[arg(long)]
    pub noise_seed: Option<u64>,
    /// Leave co-occurrence counts out of candidate prompts.
    #[arg(long)]
    pub no_coocc: bool,
    /// Leave popularity counts out of prompts.
    #[arg(long)]
    pub no_popularity: bool,
    /// Retrieval run to rerank [default: <root>/runs/retrieval.jsonl].
    #[arg(long = "in", value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Output run file [default: <root>/runs/ranked.jsonl].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub root: RootArg,
    /// Run file to score.
    #[arg(long, value_name = "FILE")]
    pub run: PathBuf,
    /// Cutoffs, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Report file [default: print to stdout].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Per-user ranks of the held-out item.
    #[arg(long, value_name = "FILE")]
    pub detail: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Working directory or its dataset/ subdirectory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Print JSON instead of a table row.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub root: RootArg,
    #[arg(long, value_delimiter = ',')]
    pub a: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub lambda: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub history: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub w: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub d: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub popularity: Vec<bool>,
    #[arg(long, value_delimiter = ',')]
    pub coocc: Vec<bool>,
    /// Directory receiving one subdirectory per configuration.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}
