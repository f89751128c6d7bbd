use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use evfilter_client::SubmittedLabel;
use evfilter_core::fusion::FusionMode;
use evfilter_core::neural::ModelKind;
use evfilter_core::pipeline::ModelChoice;
use evfilter_core::selection::{CentralityScope, SelectionMethod};

#[derive(Debug, Parser)]
#[command(name = "evfilter", version, about = "Graph-based few-shot event filtering")]
pub struct Cli {
    /// Progress messages on stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic two-blob dataset (manifest and text/image embeddings).
    Synth(SynthArgs),
    /// Fuse the modality embeddings into `fused.evb`.
    Fuse(FuseArgs),
    /// Build the ε-graph over the pool, or a KNN graph over the evaluation rows.
    Graph(GraphArgs),
    /// Leiden communities of the ε-graph.
    Cluster(ClusterArgs),
    /// Per-community centrality ranking.
    Rank(RankArgs),
    /// Pick representatives for labeling.
    Select(SelectArgs),
    /// Train a node classifier on the selected samples (manifest labels).
    Train(TrainArgs),
    /// Predict every evaluation row with a trained model or label diffusion.
    Predict(PredictArgs),
    /// Balanced accuracy of `predictions.csv` against the manifest.
    Evaluate(EvaluateArgs),
    /// Run an experiment grid from a TOML config.
    Experiment(ExperimentArgs),
    /// All stages from fusion to predictions.
    Pipeline(PipelineArgs),
    /// Serve the current selection for annotation.
    Serve(ServeArgs),
    /// Fetch pending annotation tasks from a running service.
    Queue(QueueArgs),
    /// Submit one label to a running service.
    Label(LabelArgs),
    /// Annotation progress of a running service.
    Status(RemoteArgs),
    /// Trigger propagation on a running service.
    Propagate(RemoteArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Directory holding manifest.jsonl, text.evb and optionally image.evb.
    #[arg(long, env = "EVFILTER_DATA_DIR", default_value = ".")]
    pub data_dir: PathBuf,
    /// Root for every artifact written or read by the stages [default: the data directory].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl DataArgs {
    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.data_dir.clone())
    }
}

#[derive(Debug, Clone, Args)]
pub struct GraphFlags {
    /// Cosine threshold of the selection graph.
    #[arg(long, default_value_t = evfilter_core::graph::DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Neighbours per node in the training graph.
    #[arg(long, default_value_t = evfilter_core::graph::TRAIN_KNN_K)]
    pub train_k: usize,
    /// Neighbours per node in the inference graph.
    #[arg(long, default_value_t = evfilter_core::graph::INFERENCE_KNN_K)]
    pub infer_k: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Hidden width of the graph models.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Diffusion weight of label propagation.
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Distance between class means in noise units.
    #[arg(long, default_value_t = 6.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0.0625)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.26)]
    pub relevant_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "concat")]
    pub fusion: FusionMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GraphKind {
    Epsilon,
    Knn,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "epsilon")]
    pub kind: GraphKind,
    #[arg(long, default_value_t = evfilter_core::graph::DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value_t = evfilter_core::graph::INFERENCE_KNN_K)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 1.0)]
    pub resolution: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "betweenness")]
    pub method: SelectionMethod,
    #[arg(long, default_value = "community_subgraph")]
    pub scope: CentralityScope,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "betweenness")]
    pub method: SelectionMethod,
    #[arg(long, default_value_t = 60)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "community_subgraph")]
    pub scope: CentralityScope,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "nsage_lin")]
    pub model: ModelKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub graph: GraphFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// `lgc` diffuses the selection labels; neural kinds load `model.evm`.
    #[arg(long, default_value = "nsage_lin")]
    pub model: ModelChoice,
    #[command(flatten)]
    pub graph: GraphFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// TOML experiment config; relative paths in it resolve against its directory.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the report directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelSource {
    /// Manifest labels stand in for the annotator.
    Oracle,
    /// Labels come from the annotation service.
    Interactive,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "concat")]
    pub fusion: FusionMode,
    #[arg(long, default_value = "betweenness")]
    pub method: SelectionMethod,
    #[arg(long, default_value_t = 60)]
    pub budget: usize,
    #[arg(long, default_value = "nsage_lin")]
    pub model: ModelChoice,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub resolution: f64,
    #[arg(long, default_value = "community_subgraph")]
    pub scope: CentralityScope,
    #[command(flatten)]
    pub graph: GraphFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, value_enum, default_value = "oracle")]
    pub labels: LabelSource,
    /// Service address for `--labels interactive`.
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, default_value = "nsage_lin")]
    pub model: ModelChoice,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub graph: GraphFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Built UI bundle to serve at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RemoteArgs {
    #[arg(long, env = "EVFILTER_SERVICE_URL", default_value = "http://127.0.0.1:8080/")]
    pub url: String,
}

#[derive(Debug, Args)]
pub struct QueueArgs {
    #[command(flatten)]
    pub remote: RemoteArgs,
    #[arg(long, default_value_t = 10)]
    pub limit: usize,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[command(flatten)]
    pub remote: RemoteArgs,
    #[arg(long)]
    pub id: String,
    /// relevant, irrelevant or not_sure.
    #[arg(long)]
    pub label: SubmittedLabel,
}
