use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "gatsy", version, about = "Graph-attention artist embeddings and recommendations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Assign one genre per artist from MusicBrainz tags and write labels.tsv.
    Label(LabelArgs),
    /// Generate a stochastic block model dataset directory.
    Synth(SynthArgs),
    /// Print connection statistics of a graph.
    Stats(GraphArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on the held-out test artists.
    Eval(EvalArgs),
    /// Train and evaluate several models over several seeds.
    Compare(CompareArgs),
    /// Nearest artists to an existing artist.
    Recommend(RecommendArgs),
    /// Recommendations for a fictitious artist connected to chosen members.
    Inject(InjectArgs),
    /// Serve the JSON API.
    Serve(ServeArgs),
}

/// Where the graph comes from: a dataset directory or explicit files.
#[derive(Args, Debug, Clone, Default)]
pub struct GraphArgs {
    /// Dataset directory holding edges.tsv, ids.tsv, features and optionally labels.tsv.
    #[arg(long, conflicts_with_all = ["edges", "ids"])]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "ids")]
    pub edges: Option<PathBuf>,
    #[arg(long, requires = "edges")]
    pub ids: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    /// Feature matrix (text or binary); defaults to the one in --data.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Genre labels; defaults to labels.tsv in --data when present.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LabelArgs {
    #[arg(long)]
    pub edges: PathBuf,
    #[arg(long)]
    pub ids: PathBuf,
    /// Directory of cached MusicBrainz responses.
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use cached responses only.
    #[arg(long)]
    pub offline: bool,
    /// Text embedding provider: `stub` or `file:PATH` with `text<TAB>v1,v2,...` lines.
    #[arg(long, default_value = "stub")]
    pub provider: String,
    #[arg(long)]
    pub base_url: Option<String>,
    /// Minimum delay between requests in milliseconds.
    #[arg(long, default_value_t = 1000)]
    pub min_interval_ms: u64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    #[arg(long, default_value_t = 100)]
    pub nodes_per_block: usize,
    #[arg(long, default_value_t = 0.1)]
    pub p_in: f64,
    #[arg(long, default_value_t = 0.005)]
    pub p_out: f64,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0.25)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Fc,
    Sage,
    SageBn,
    Gatsy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NegativesKind {
    InverseDensity,
    Clipped,
}

/// Overrides of the training defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct HyperArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Sampled neighbors per graph layer, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub fanouts: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub negatives: Option<NegativesKind>,
    /// Weight cap of the clipped negative scheme.
    #[arg(long, default_value_t = 1.4)]
    pub clip: f64,
    /// Add the genre classification head and its cross-entropy term.
    #[arg(long)]
    pub supervised: bool,
    /// Skip the per-epoch validation score.
    #[arg(long)]
    pub no_validate: bool,
    #[arg(long)]
    pub eval_k: Option<usize>,
    /// Width of every hidden layer.
    #[arg(long)]
    pub hidden_dim: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "gatsy")]
    pub model: ModelKind,
    /// Replace the features with standard normal noise of the same shape.
    #[arg(long)]
    pub random_features: bool,
    #[arg(long, default_value_t = 1000)]
    pub feature_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines training log; defaults to the checkpoint path plus `.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 200)]
    pub k: usize,
    /// Defaults to the split the checkpoint was trained on.
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "fc,sage,sage-bn,gatsy")]
    pub models: Vec<ModelKind>,
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long, default_value_t = 200)]
    pub k: usize,
    #[arg(long)]
    pub random_features: bool,
    #[arg(long, default_value_t = 1000)]
    pub feature_seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Args, Debug)]
pub struct RecommendArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Artist id or exact name.
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct InjectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Ids of the artists the fictitious one is connected to.
    #[arg(long, value_delimiter = ',', required = true)]
    pub members: Vec<String>,
    #[arg(long, default_value = "Fictitious artist")]
    pub name: String,
    /// Explicit feature vector, comma separated; the members' mean otherwise.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub feature_values: Option<Vec<f64>>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
}
