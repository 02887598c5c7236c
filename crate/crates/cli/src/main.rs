mod commands;

use std::path::PathBuf;

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use okgit::dataset::Split;
use okgit::encoder::TypeScoreVariant;
use okgit::lm::ProviderKind;
use okgit::reports::Space;

#[derive(Parser)]
#[command(name = "okgit", version, about = "Type-aware link prediction over open knowledge graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Context used when training without a cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LiveContext {
    None,
    Concat,
    Add,
}

#[derive(Subcommand)]
enum Command {
    /// Convert, filter and inverse-augment a dataset directory.
    Prepare(PrepareArgs),
    /// Compute context vectors for every query of a prepared dataset.
    Extract(ExtractArgs),
    /// Write LM phrase vectors for initializing NP and word embeddings.
    InitVectors(InitVectorsArgs),
    /// Train one configuration.
    Train(TrainArgs),
    /// Train every point of a hyperparameter grid and pick the best.
    Grid(GridArgs),
    /// Filtered link-prediction metrics of a checkpoint or the LM baseline.
    Eval(EvalArgs),
    /// Type-compatibility F1 of top-1 predictions against a typer cache.
    TypeEval(TypeEvalArgs),
    /// Type probe of a masked LM on a typed knowledge graph.
    ProbeTypes(ProbeArgs),
    /// Run or resume an experiment manifest.
    Run(RunArgs),
    /// Top-k predictions for hand-picked queries.
    Dump(DumpArgs),
    /// 2-d projection of annotated NPs.
    Tsne(TsneArgs),
    /// NP phrases in a seeded random order, for annotators.
    NpList(NpListArgs),
}

#[derive(clap::Args)]
pub struct PrepareArgs {
    /// Dataset directory; the destination when converting a CaRE release.
    #[arg(long)]
    pub data: PathBuf,
    /// Write here instead of rewriting `--data`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub from_care_release: Option<PathBuf>,
    /// Keep only triples whose NPs are single LM tokens.
    #[arg(long)]
    pub filter_single_token: bool,
    /// One token per line.
    #[arg(long, conflicts_with = "lm")]
    pub lm_vocab: Option<PathBuf>,
    /// Masked LM directory whose tokenizer decides single-tokenness.
    #[arg(long)]
    pub lm: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub provider: ProviderKind,
    #[arg(long)]
    pub out: PathBuf,
    /// Masked LM directory for the mlm-* providers.
    #[arg(long)]
    pub lm: Option<PathBuf>,
    /// Typing distributions for the typing provider.
    #[arg(long)]
    pub typing: Option<PathBuf>,
    /// Splits to cover; all by default.
    #[arg(long, value_delimiter = ',')]
    pub splits: Vec<Split>,
}

#[derive(clap::Args)]
pub struct InitVectorsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub lm: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Context cache; its provider becomes the model's context.
    #[arg(long, conflicts_with = "context")]
    pub cache: Option<PathBuf>,
    /// Context when no cache is given.
    #[arg(long, value_enum)]
    pub context: Option<LiveContext>,
    /// Base training configuration (JSON); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub d_type: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub type_score: Option<TypeScoreVariant>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Vectors written by `init-vectors`.
    #[arg(long)]
    pub init_vectors: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args)]
pub struct GridArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args)]
#[command(group(ArgGroup::new("model").required(true).args(["ckpt", "lm_baseline"])))]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Rank single-token NPs by the masked LM's logits instead.
    #[arg(long)]
    pub lm_baseline: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub unfiltered: bool,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct TypeEvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Typer cache, `sentence<TAB>mention<TAB>type1,type2,...`.
    #[arg(long, required_unless_present = "write_requests")]
    pub typer: Option<PathBuf>,
    /// Write the `sentence<TAB>mention` pairs the typer must cover and stop.
    #[arg(long)]
    pub write_requests: Option<PathBuf>,
    /// Second checkpoint for paired significance tests.
    #[arg(long)]
    pub compare_ckpt: Option<PathBuf>,
    #[arg(long, requires = "compare_ckpt")]
    pub compare_cache: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct ProbeArgs {
    /// `head<TAB>relation<TAB>tail` triples.
    #[arg(long)]
    pub triples: PathBuf,
    /// `entity<TAB>type1,type2,...` gold types.
    #[arg(long)]
    pub types: PathBuf,
    /// Human type annotations for the subset.
    #[arg(long)]
    pub human: Option<PathBuf>,
    #[arg(long)]
    pub lm: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(clap::Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// `head<TAB>relation` lines.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(short, default_value_t = 5)]
    pub k: usize,
    /// Second checkpoint shown side by side.
    #[arg(long)]
    pub compare_ckpt: Option<PathBuf>,
    #[arg(long, requires = "compare_ckpt")]
    pub compare_cache: Option<PathBuf>,
    /// Also write the rows as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct TsneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// `np<TAB>label` lines in scan order.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, default_value = "type")]
    pub space: Space,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = okgit::reports::tsne::TSNE_PERPLEXITY)]
    pub perplexity: f64,
    #[arg(long, default_value_t = okgit::reports::tsne::TSNE_ITERATIONS)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Annotations kept per label, in file order.
    #[arg(long, default_value_t = okgit::reports::tsne::SCAN_PER_CATEGORY)]
    pub scan: usize,
    /// NPs sampled per label from the kept ones.
    #[arg(long, default_value_t = okgit::reports::tsne::PICK_PER_CATEGORY)]
    pub pick: usize,
}

#[derive(clap::Args)]
pub struct NpListArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Extract(a) => commands::extract(a),
        Command::InitVectors(a) => commands::init_vectors(a),
        Command::Train(a) => commands::train(a),
        Command::Grid(a) => commands::grid(a),
        Command::Eval(a) => commands::eval(a),
        Command::TypeEval(a) => commands::type_eval(a),
        Command::ProbeTypes(a) => commands::probe_types(a),
        Command::Run(a) => commands::run(a),
        Command::Dump(a) => commands::dump(a),
        Command::Tsne(a) => commands::tsne(a),
        Command::NpList(a) => commands::np_list(a),
    }
}
