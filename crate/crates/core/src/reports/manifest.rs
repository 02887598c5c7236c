//! Resumable end-to-end experiment runs described by one JSON manifest.
//!
//! Stages run in order `prepare → extract → train → eval → reports`. Each
//! completed stage leaves `stages/<name>.done` holding the manifest hash, so
//! a rerun skips finished work and a failed stage is retried from its start.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dump::{dump_topk_predictions, parse_queries, query_ids, render_side_by_side};
use super::tsne::{export_tsne, parse_annotations, select_annotated, silhouette_score, space_vectors, tsne_csv, Space,
    TsneOptions, PICK_PER_CATEGORY, SCAN_PER_CATEGORY};
use crate::dataset::{convert_care_release, filter_single_token, load_openkg, OpenKg, Split, VocabSet};
use crate::encoder::{ContextSpec, InitVectors, NpInit, WordInit};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_link_prediction, type_compat_f1, EvalOptions, TyperResults};
use crate::lm::{lm_init_vectors, required_queries, ContextProvider, ContextQuery, ContextVectorCache, MaskedLanguageModel,
    TypingDistributions};
use crate::model::{ContextTable, OkgitModel};
use crate::synthetic::{ToyKg, ToySpec};
use crate::training::{fit, grid_search, GridSpec, TrainConfig};

/// Where the triples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    /// A directory in the canonical TSV layout.
    Openkg { dir: PathBuf },
    /// A directory in the CaRE distribution layout.
    Care { dir: PathBuf },
    /// A generated toy graph.
    Synthetic { spec: ToySpec },
}

/// Restricts the graph to triples whose NPs are single LM tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SingleTokenSource {
    Lm { model_dir: PathBuf },
    Vocab { path: PathBuf },
}

/// Where context vectors `t_B` come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ContextSource {
    /// No cached context: CaRE runs and the live concat/add providers.
    None,
    /// An existing cache file; it must cover every split.
    Cache { path: PathBuf },
    /// A masked LM directory, run once over every query.
    Lm { model_dir: PathBuf, provider: String },
    /// Typing distributions in the per-query TSV format.
    Typing { path: PathBuf },
    /// The answer-type oracle of a synthetic dataset.
    SyntheticOracle { dim: usize, noise: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum TrainingPlan {
    Single(TrainConfig),
    Grid(GridSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationPlan {
    pub splits: Vec<Split>,
    pub filtered: bool,
    pub batch_size: usize,
    /// Typer cache for type-compatibility F1 on each split.
    pub typer: Option<PathBuf>,
}

impl Default for EvaluationPlan {
    fn default() -> Self {
        EvaluationPlan {
            splits: vec![Split::Test],
            filtered: true,
            batch_size: EvalOptions::default().batch_size,
            typer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportPlan {
    /// `head<TAB>relation` queries for the top-k dump.
    pub dump_queries: Option<PathBuf>,
    pub k: usize,
    /// `np<TAB>label` annotations in scan order for the t-SNE export.
    pub tsne_annotations: Option<PathBuf>,
    pub tsne: TsneOptions,
}

impl Default for ReportPlan {
    fn default() -> Self {
        ReportPlan {
            dump_queries: None,
            k: 5,
            tsne_annotations: None,
            tsne: TsneOptions::default(),
        }
    }
}

/// Full description of a run. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    /// Overrides the model seed of every training configuration.
    pub seed: u64,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub single_token: Option<SingleTokenSource>,
    pub context: ContextSource,
    /// LM directory for NP and word initialization vectors, when the model
    /// asks for them and names no file.
    #[serde(default)]
    pub init_lm: Option<PathBuf>,
    pub training: TrainingPlan,
    #[serde(default)]
    pub evaluation: EvaluationPlan,
    #[serde(default)]
    pub reports: ReportPlan,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prepare,
    Extract,
    Train,
    Eval,
    Reports,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Prepare, Stage::Extract, Stage::Train, Stage::Eval, Stage::Reports];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Extract => "extract",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Reports => "reports",
        }
    }
}

/// What a call to [`run_manifest`] did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub manifest_sha256: String,
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
}

/// Manifest identity embedded in every report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestStamp {
    pub manifest_sha256: String,
    pub seed: u64,
}

impl ExperimentManifest {
    /// Parses a manifest file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: ExperimentManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.resolve_paths(base);
        Ok(m)
    }

    /// Joins every relative path onto `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetSource::Openkg { dir } | DatasetSource::Care { dir } => fix(dir),
            DatasetSource::Synthetic { .. } => {}
        }
        match &mut self.single_token {
            Some(SingleTokenSource::Lm { model_dir }) => fix(model_dir),
            Some(SingleTokenSource::Vocab { path }) => fix(path),
            None => {}
        }
        match &mut self.context {
            ContextSource::Cache { path } | ContextSource::Typing { path } => fix(path),
            ContextSource::Lm { model_dir, .. } => fix(model_dir),
            ContextSource::None | ContextSource::SyntheticOracle { .. } => {}
        }
        for p in [&mut self.init_lm, &mut self.evaluation.typer, &mut self.reports.dump_queries, &mut self.reports.tsne_annotations]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        let configs: Vec<&mut TrainConfig> = match &mut self.training {
            TrainingPlan::Single(c) => vec![c],
            TrainingPlan::Grid(g) => vec![&mut g.base],
        };
        for c in configs {
            if let Some(p) = &mut c.model.init_vectors {
                fix(p);
            }
        }
        fix(&mut self.output_dir);
    }

    /// SHA-256 of the compact JSON serialization, in hex. The output
    /// directory is left out so identical experiments written to different
    /// places share a hash.
    pub fn sha256(&self) -> String {
        let mut m = self.clone();
        m.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&m).expect("manifest serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn stamp(&self) -> ManifestStamp {
        ManifestStamp {
            manifest_sha256: self.sha256(),
            seed: self.seed,
        }
    }

    fn training_configs(&self) -> Vec<&TrainConfig> {
        match &self.training {
            TrainingPlan::Single(c) => vec![c],
            TrainingPlan::Grid(g) => vec![&g.base],
        }
    }

    fn needs_init_vectors(&self) -> bool {
        self.training_configs().iter().any(|c| {
            (c.model.np_init != NpInit::Random || c.model.word_init != WordInit::Random) && c.model.init_vectors.is_none()
        })
    }
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn context_cache(&self, provider: &str) -> PathBuf {
        self.root.join("context").join(format!("{provider}.ctx"))
    }
    fn init_vectors(&self) -> PathBuf {
        self.root.join("context").join("init_vectors.safetensors")
    }
    fn checkpoint_pointer(&self) -> PathBuf {
        self.root.join("checkpoint.txt")
    }
    fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    fn marker(&self, stage: Stage) -> PathBuf {
        self.root.join("stages").join(format!("{}.done", stage.name()))
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// A report with the manifest identity alongside.
#[derive(Serialize)]
struct Stamped<'a, T> {
    manifest: &'a ManifestStamp,
    #[serde(flatten)]
    body: T,
}

/// Runs every unfinished stage of `manifest`.
pub fn run_manifest(manifest: &ExperimentManifest) -> Result<RunOutcome> {
    let stamp = manifest.stamp();
    let layout = Layout {
        root: manifest.output_dir.clone(),
    };
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    let mut executed = Vec::new();
    let mut skipped = Vec::new();
    for stage in Stage::ALL {
        let marker = layout.marker(stage);
        if marker.exists() {
            let owner = read_text(&marker)?;
            if owner.trim() != stamp.manifest_sha256 {
                return Err(Error::Config(format!(
                    "{} was produced by manifest {}, not {}; use a fresh output directory",
                    layout.root.display(),
                    owner.trim(),
                    stamp.manifest_sha256
                )));
            }
            skipped.push(stage);
            continue;
        }
        log::info!("stage {}", stage.name());
        match stage {
            Stage::Prepare => prepare(manifest, &layout)?,
            Stage::Extract => extract(manifest, &layout)?,
            Stage::Train => train(manifest, &layout)?,
            Stage::Eval => eval(manifest, &layout, &stamp)?,
            Stage::Reports => reports(manifest, &layout, &stamp)?,
        }
        write_file(&marker, format!("{}\n", stamp.manifest_sha256))?;
        executed.push(stage);
    }
    Ok(RunOutcome {
        output_dir: layout.root,
        manifest_sha256: stamp.manifest_sha256,
        executed,
        skipped,
    })
}

fn prepare(m: &ExperimentManifest, layout: &Layout) -> Result<()> {
    let raw = match &m.dataset {
        DatasetSource::Openkg { dir } => load_openkg(dir)?,
        DatasetSource::Care { dir } => convert_care_release(dir)?,
        DatasetSource::Synthetic { spec } => ToyKg::generate(spec)?.kg,
    };
    let raw = match &m.single_token {
        None => raw,
        Some(_) if matches!(m.dataset, DatasetSource::Synthetic { .. }) => {
            return Err(Error::Config("single-token filtering does not apply to synthetic data".into()))
        }
        Some(SingleTokenSource::Lm { model_dir }) => {
            let lm = MaskedLanguageModel::load(model_dir, "filter")?;
            filter_single_token(&raw, &lm)
        }
        Some(SingleTokenSource::Vocab { path }) => filter_single_token(&raw, &VocabSet::from_lines(&read_text(path)?)),
    };
    raw.validate()?;
    let kg = if raw.is_augmented() { raw } else { raw.augment_inverse_relations()? };
    kg.save(&layout.data())?;
    write_json(&layout.data().join("stats.json"), &kg.stats())
}

fn load_kg(layout: &Layout) -> Result<OpenKg> {
    load_openkg(&layout.data())
}

/// Provider id and dimension of the cached context, if any.
fn context_identity(m: &ExperimentManifest) -> Result<Option<(String, PathBuf)>> {
    let layout = Layout {
        root: m.output_dir.clone(),
    };
    Ok(match &m.context {
        ContextSource::None => None,
        ContextSource::Cache { path } => Some((ContextVectorCache::open(path)?.provider_id().to_string(), path.clone())),
        ContextSource::Lm { provider, .. } => Some((provider.clone(), layout.context_cache(provider))),
        ContextSource::Typing { .. } => Some(("typing".into(), layout.context_cache("typing"))),
        ContextSource::SyntheticOracle { .. } => Some(("type-oracle".into(), layout.context_cache("type-oracle"))),
    })
}

fn warm(path: &Path, kg: &OpenKg, queries: &[ContextQuery], provider: &dyn ContextProvider) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut cache = ContextVectorCache::open_or_create(path, provider.provider_id(), provider.dim())?;
    let added = cache.warm(kg, queries, provider)?;
    log::info!("{}: {added} new context vectors", path.display());
    Ok(())
}

fn extract(m: &ExperimentManifest, layout: &Layout) -> Result<()> {
    let kg = load_kg(layout)?;
    let queries = required_queries(&kg, &Split::ALL)?;
    match &m.context {
        ContextSource::None => {}
        ContextSource::Cache { path } => {
            let cache = ContextVectorCache::open(path)?;
            ContextTable::from_cache_queries(&cache, &kg, &queries)?;
        }
        ContextSource::Lm { model_dir, provider } => {
            let lm = MaskedLanguageModel::load(model_dir, provider)?;
            warm(&layout.context_cache(provider), &kg, &queries, &lm)?;
        }
        ContextSource::Typing { path } => {
            let typing = TypingDistributions::load(path)?;
            warm(&layout.context_cache("typing"), &kg, &queries, &typing)?;
        }
        ContextSource::SyntheticOracle { dim, noise, seed } => {
            let DatasetSource::Synthetic { spec } = &m.dataset else {
                return Err(Error::Config("the synthetic oracle needs a synthetic dataset".into()));
            };
            let oracle = ToyKg::generate(spec)?.type_oracle(*dim, *noise, *seed);
            warm(&layout.context_cache("type-oracle"), &kg, &queries, &oracle)?;
        }
    }
    if m.needs_init_vectors() {
        let dir = m
            .init_lm
            .as_ref()
            .ok_or_else(|| Error::Config("LM initialization requested but `init_lm` is not set".into()))?;
        let lm = MaskedLanguageModel::load(dir, "init")?;
        let path = layout.init_vectors();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        lm_init_vectors(&lm, &kg)?.save(&path)?;
    }
    Ok(())
}

fn context_table(m: &ExperimentManifest, kg: &OpenKg) -> Result<Option<ContextTable>> {
    match context_identity(m)? {
        None => Ok(None),
        Some((_, path)) => Ok(Some(ContextTable::from_cache(&ContextVectorCache::open(&path)?, kg, &Split::ALL)?)),
    }
}

fn with_seed(c: &TrainConfig, seed: u64) -> TrainConfig {
    let mut c = c.clone();
    c.model.seed = seed;
    c
}

fn train(m: &ExperimentManifest, layout: &Layout) -> Result<()> {
    let kg = load_kg(layout)?;
    let ctx = context_table(m, &kg)?;
    // Generated vectors are passed in memory so checkpoint configs do not
    // record a path inside the output directory.
    let init = if m.needs_init_vectors() {
        Some(InitVectors::load(&layout.init_vectors())?)
    } else {
        None
    };
    let dir = match &m.training {
        TrainingPlan::Single(c) => {
            let cfg = with_seed(c, m.seed);
            let dir = layout.root.join("checkpoint");
            fit(&kg, ctx.as_ref(), &cfg, init.as_ref(), Some(&dir))?;
            dir
        }
        TrainingPlan::Grid(g) => {
            let grid = GridSpec {
                base: with_seed(&g.base, m.seed),
                ..g.clone()
            };
            let contexts: BTreeMap<String, ContextTable> = ctx
                .into_iter()
                .map(|t| (t.provider_id().to_string(), t))
                .collect();
            grid_search(&kg, &contexts, &grid, init.as_ref(), &layout.root.join("grid"))?.best_dir
        }
    };
    let rel = dir.strip_prefix(&layout.root).unwrap_or(&dir);
    write_file(&layout.checkpoint_pointer(), format!("{}\n", rel.display()))
}

fn load_checkpoint(m: &ExperimentManifest, layout: &Layout, kg: &OpenKg) -> Result<(OkgitModel, Option<ContextTable>)> {
    let rel = read_text(&layout.checkpoint_pointer())?;
    let (model, _) = OkgitModel::load(&layout.root.join(rel.trim()), kg)?;
    let ctx = match model.config().context {
        ContextSpec::Cached { .. } => context_table(m, kg)?,
        _ => None,
    };
    Ok((model, ctx))
}

fn eval(m: &ExperimentManifest, layout: &Layout, stamp: &ManifestStamp) -> Result<()> {
    let kg = load_kg(layout)?;
    let (model, ctx) = load_checkpoint(m, layout, &kg)?;
    let config = serde_json::json!({
        "manifest": stamp,
        "checkpoint": OkgitModel::read_config(&layout.root.join(read_text(&layout.checkpoint_pointer())?.trim()))?,
    });
    let options = EvalOptions {
        filtered: m.evaluation.filtered,
        batch_size: m.evaluation.batch_size,
    };
    let typer = m.evaluation.typer.as_deref().map(TyperResults::load).transpose()?;
    for &split in &m.evaluation.splits {
        let name = split_name(split);
        let report = evaluate_link_prediction(&model, &kg, ctx.as_ref(), split, options, config.clone())?;
        write_json(&layout.reports().join(format!("eval_{name}.json")), &report)?;
        if let Some(t) = &typer {
            let r = type_compat_f1(&model, &kg, ctx.as_ref(), split, t, options.batch_size)?;
            write_json(
                &layout.reports().join(format!("type_eval_{name}.json")),
                &Stamped { manifest: stamp, body: r },
            )?;
        }
    }
    Ok(())
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    }
}

#[derive(Serialize)]
struct TsneSummary {
    points: usize,
    options: TsneOptions,
    /// Silhouette of the original vectors and of the 2-d projection, per
    /// space.
    silhouettes: BTreeMap<String, (f64, f64)>,
    files: BTreeMap<String, String>,
}

fn reports(m: &ExperimentManifest, layout: &Layout, stamp: &ManifestStamp) -> Result<()> {
    let kg = load_kg(layout)?;
    let (model, ctx) = load_checkpoint(m, layout, &kg)?;
    let out = layout.reports();
    if let Some(path) = &m.reports.dump_queries {
        let queries = parse_queries(&read_text(path)?)?;
        // Dump queries may fall outside the splits; cached contexts are read
        // for exactly these queries.
        let ctx = match (&model.config().context, context_identity(m)?) {
            (ContextSpec::Cached { .. }, Some((_, cache))) => {
                let offset = kg.inverse_offset().expect("prepared graphs are augmented");
                let mut qs: Vec<ContextQuery> = query_ids(&kg, &queries)?
                    .into_iter()
                    .map(|(h, r)| ContextQuery::from_augmented(h, r, offset))
                    .collect();
                qs.sort();
                qs.dedup();
                Some(ContextTable::from_cache_queries(&ContextVectorCache::open(&cache)?, &kg, &qs)?)
            }
            _ => ctx,
        };
        let rows = dump_topk_predictions(&model, &kg, ctx.as_ref(), &queries, m.reports.k)?;
        write_file(&out.join("topk.md"), render_side_by_side(&[("okgit", &rows)])?)?;
        write_json(
            &out.join("topk.json"),
            &Stamped {
                manifest: stamp,
                body: serde_json::json!({ "k": m.reports.k, "rows": rows }),
            },
        )?;
    }
    if let Some(path) = &m.reports.tsne_annotations {
        let all = parse_annotations(&kg, &read_text(path)?)?;
        let chosen = select_annotated(&all, SCAN_PER_CATEGORY, PICK_PER_CATEGORY, m.seed);
        let labels: Vec<String> = chosen.iter().map(|a| a.label.clone()).collect();
        let mut spaces = vec![Space::Np];
        if model.type_head().is_some() {
            spaces.push(Space::Type);
        }
        let mut summary = TsneSummary {
            points: chosen.len(),
            options: m.reports.tsne,
            silhouettes: BTreeMap::new(),
            files: BTreeMap::new(),
        };
        for space in spaces {
            let name = match space {
                Space::Np => "np",
                Space::Type => "type",
            };
            let points = export_tsne(&model, &chosen, space, &m.reports.tsne)?;
            let csv = tsne_csv(&points);
            let file = format!("tsne_{name}.csv");
            write_file(&out.join(&file), &csv)?;
            let y = ndarray::Array2::from_shape_fn((points.len(), 2), |(i, j)| if j == 0 { points[i].x } else { points[i].y });
            let high = silhouette_score(space_vectors(&model, &chosen, space)?.view(), &labels)?;
            let low = silhouette_score(y.view(), &labels)?;
            summary.silhouettes.insert(name.to_string(), (high, low));
            summary.files.insert(file, hex::encode(Sha256::digest(csv.as_bytes())));
        }
        write_json(&out.join("tsne.json"), &Stamped { manifest: stamp, body: summary })?;
    }
    Ok(())
}
