use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use okgit::dataset::{convert_care_release, filter_single_token, load_openkg, OpenKg, Split, VocabSet};
use okgit::encoder::{ContextSpec, InitVectors};
use okgit::evaluation::{
    evaluate_link_prediction, evaluate_lm_baseline, freebase_type_probe, load_human_annotations, probe_predictions,
    significance_tests, type_compat_f1, typer_requests, EvalOptions, TypedKg, TyperResults,
};
use okgit::lm::{lm_init_vectors, required_queries, ContextProvider, ContextQuery, ContextVectorCache,
    MaskedLanguageModel, ProviderKind, TypingDistributions};
use okgit::model::{ContextTable, OkgitModel};
use okgit::reports::tsne::{parse_annotations, select_annotated, shuffled_nps};
use okgit::reports::{dump_topk_predictions, export_tsne, render_side_by_side, run_manifest, tsne_csv,
    ExperimentManifest, TsneOptions};
use okgit::training::{fit, grid_search, GridSpec, TrainConfig, GRID_GAMMA, GRID_LAMBDA, GRID_TYPE_DIM};

use crate::{DumpArgs, EvalArgs, ExtractArgs, GridArgs, InitVectorsArgs, LiveContext, NpListArgs, PrepareArgs,
    ProbeArgs, RunArgs, TrainArgs, TsneArgs, TypeEvalArgs};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Loads a dataset that `prepare` has already augmented.
fn load_prepared(dir: &Path) -> Result<OpenKg> {
    let kg = load_openkg(dir)?;
    if !kg.is_augmented() {
        bail!("{} has no inverse relations; run `okgit prepare --data {}` first", dir.display(), dir.display());
    }
    Ok(kg)
}

/// The context table a checkpoint needs for `queries`, read from `cache`.
fn checkpoint_context(
    model: &OkgitModel,
    kg: &OpenKg,
    cache: Option<&Path>,
    queries: &[ContextQuery],
) -> Result<Option<ContextTable>> {
    match (&model.config().context, cache) {
        (ContextSpec::Cached { provider, .. }, Some(path)) => {
            let cache = ContextVectorCache::open(path)?;
            cache.check_provider(provider)?;
            Ok(Some(ContextTable::from_cache_queries(&cache, kg, queries)?))
        }
        (ContextSpec::Cached { provider, .. }, None) => {
            bail!("the checkpoint scores with cached `{provider}` context; pass --cache")
        }
        (_, Some(path)) => {
            log::warn!("the checkpoint has no cached context; ignoring {}", path.display());
            Ok(None)
        }
        (_, None) => Ok(None),
    }
}

fn split_queries(kg: &OpenKg, split: Split) -> Result<Vec<ContextQuery>> {
    Ok(required_queries(kg, &[split])?)
}

fn phrase_queries(kg: &OpenKg, queries: &[(String, String)]) -> Result<Vec<ContextQuery>> {
    let offset = kg.inverse_offset().context("the dataset is not augmented")?;
    let mut qs: Vec<ContextQuery> = okgit::reports::dump::query_ids(kg, queries)?
        .into_iter()
        .map(|(h, r)| ContextQuery::from_augmented(h, r, offset))
        .collect();
    qs.sort();
    qs.dedup();
    Ok(qs)
}

pub fn prepare(a: PrepareArgs) -> Result<()> {
    let raw = match &a.from_care_release {
        Some(dir) => convert_care_release(dir)?,
        None => load_openkg(&a.data)?,
    };
    let dest = a.out.clone().unwrap_or_else(|| a.data.clone());
    let raw = if a.filter_single_token {
        if a.from_care_release.is_none() && dest == a.data {
            bail!("filtering drops triples; pass --out so {} is kept", a.data.display());
        }
        match (&a.lm_vocab, &a.lm) {
            (Some(vocab), _) => filter_single_token(&raw, &VocabSet::from_lines(&read(vocab)?)),
            (None, Some(dir)) => filter_single_token(&raw, &MaskedLanguageModel::load(dir, "filter")?),
            (None, None) => bail!("--filter-single-token needs --lm-vocab or --lm"),
        }
    } else {
        raw
    };
    raw.validate()?;
    let kg = if raw.is_augmented() { raw } else { raw.augment_inverse_relations()? };
    kg.save(&dest)?;
    let stats = kg.stats();
    write_json(&dest.join("stats.json"), &stats)?;
    print_json(&stats)
}

pub fn extract(a: ExtractArgs) -> Result<()> {
    if a.provider.is_live() {
        bail!(
            "`{}` context is computed from the trainable encodings during training and is never cached; \
             train with `--context {}`",
            a.provider,
            a.provider
        );
    }
    let kg = load_prepared(&a.data)?;
    let splits = if a.splits.is_empty() { Split::ALL.to_vec() } else { a.splits.clone() };
    let queries = required_queries(&kg, &splits)?;
    let provider: Box<dyn ContextProvider> = match a.provider {
        ProviderKind::Typing => {
            let path = a.typing.as_deref().context("the typing provider needs --typing")?;
            Box::new(TypingDistributions::load(path)?)
        }
        kind => {
            let dir = a.lm.as_deref().with_context(|| format!("the {kind} provider needs --lm"))?;
            Box::new(MaskedLanguageModel::load(dir, kind.id())?)
        }
    };
    let mut cache = ContextVectorCache::open_or_create(&a.out, provider.provider_id(), provider.dim())?;
    let added = cache.warm(&kg, &queries, provider.as_ref())?;
    print_json(&json!({
        "provider": provider.provider_id(),
        "dim": provider.dim(),
        "queries": queries.len(),
        "added": added,
        "cached": cache.len(),
    }))
}

pub fn init_vectors(a: InitVectorsArgs) -> Result<()> {
    let kg = load_prepared(&a.data)?;
    let lm = MaskedLanguageModel::load(&a.lm, "init")?;
    lm_init_vectors(&lm, &kg)?.save(&a.out)?;
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let kg = load_prepared(&a.data)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(path) => serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))?,
        None => TrainConfig::default(),
    };
    let ctx = match (&a.cache, a.context) {
        (Some(path), _) => {
            let cache = ContextVectorCache::open(path)?;
            cfg.model.context = ContextSpec::Cached {
                provider: cache.provider_id().to_string(),
                dim: cache.dim(),
            };
            Some(ContextTable::from_cache(&cache, &kg, &Split::ALL)?)
        }
        (None, Some(live)) => {
            cfg.model.context = match live {
                LiveContext::None => ContextSpec::None,
                LiveContext::Concat => ContextSpec::Concat,
                LiveContext::Add => ContextSpec::Add,
            };
            None
        }
        (None, None) => {
            if let ContextSpec::Cached { provider, .. } = &cfg.model.context {
                bail!("the configuration uses cached `{provider}` context; pass --cache");
            }
            None
        }
    };
    if let Some(v) = a.d_type {
        cfg.model.type_dim = v;
    }
    if let Some(v) = a.gamma {
        cfg.model.gamma = v;
    }
    if let Some(v) = a.lambda {
        cfg.options.lambda = v;
    }
    if let Some(v) = a.type_score {
        cfg.model.type_score_variant = v;
    }
    if let Some(v) = a.seed {
        cfg.model.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.options.epochs = v;
    }
    if let Some(v) = a.train_fraction {
        cfg.options.train_fraction = v;
    }
    let init = a.init_vectors.as_deref().map(InitVectors::load).transpose()?;
    let outcome = fit(&kg, ctx.as_ref(), &cfg, init.as_ref(), Some(&a.out))?;
    print_json(&json!({
        "checkpoint": a.out,
        "best_epoch": outcome.best_epoch,
        "valid": outcome.best_valid,
    }))
}

fn standard_type_dim() -> Vec<usize> {
    GRID_TYPE_DIM.to_vec()
}

fn standard_lambda() -> Vec<f64> {
    GRID_LAMBDA.to_vec()
}

fn standard_gamma() -> Vec<f64> {
    GRID_GAMMA.to_vec()
}

/// `grid.json`: inputs plus the searched ranges. Relative paths resolve
/// against the file's directory; omitted ranges use the standard grid.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    data: PathBuf,
    /// Provider id → context cache.
    caches: BTreeMap<String, PathBuf>,
    #[serde(default)]
    init_vectors: Option<PathBuf>,
    #[serde(default)]
    base: TrainConfig,
    #[serde(default = "standard_type_dim")]
    type_dim: Vec<usize>,
    #[serde(default = "standard_lambda")]
    lambda: Vec<f64>,
    #[serde(default = "standard_gamma")]
    gamma: Vec<f64>,
}

pub fn grid(a: GridArgs) -> Result<()> {
    let mut g: GridFile =
        serde_json::from_str(&read(&a.config)?).with_context(|| format!("parsing {}", a.config.display()))?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    resolve(&mut g.data);
    g.caches.values_mut().for_each(resolve);
    if let Some(p) = g.init_vectors.as_mut() {
        resolve(p);
    }
    if g.caches.is_empty() {
        bail!("{} lists no context caches", a.config.display());
    }
    let kg = load_prepared(&g.data)?;
    let mut contexts = BTreeMap::new();
    let mut providers = Vec::new();
    for (id, path) in &g.caches {
        let cache = ContextVectorCache::open(path)?;
        cache.check_provider(id)?;
        providers.push((id.clone(), cache.dim()));
        contexts.insert(id.clone(), ContextTable::from_cache(&cache, &kg, &Split::ALL)?);
    }
    let spec = GridSpec {
        base: g.base,
        type_dim: g.type_dim,
        lambda: g.lambda,
        gamma: g.gamma,
        providers,
    };
    let init = g.init_vectors.as_deref().map(InitVectors::load).transpose()?;
    let outcome = grid_search(&kg, &contexts, &spec, init.as_ref(), &a.out)?;
    print_json(&json!({
        "points": outcome.rows.len(),
        "best": outcome.best.label,
        "best_dir": outcome.best_dir,
        "valid": outcome.best.metrics,
    }))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let kg = load_prepared(&a.data)?;
    let options = EvalOptions {
        filtered: !a.unfiltered,
        batch_size: a.batch_size,
    };
    let report = match (&a.ckpt, &a.lm_baseline) {
        (Some(dir), _) => {
            let (model, ckpt) = OkgitModel::load(dir, &kg)?;
            let ctx = checkpoint_context(&model, &kg, a.cache.as_deref(), &split_queries(&kg, a.split)?)?;
            let config = json!({ "checkpoint": dir, "model": ckpt, "data": a.data, "cache": a.cache });
            evaluate_link_prediction(&model, &kg, ctx.as_ref(), a.split, options, config)?
        }
        (None, Some(dir)) => {
            let lm = MaskedLanguageModel::load(dir, "lm-baseline")?;
            let config = json!({ "lm_baseline": dir, "data": a.data });
            evaluate_lm_baseline(&lm, &kg, a.split, options, config)?
        }
        (None, None) => unreachable!("clap requires --ckpt or --lm-baseline"),
    };
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    print_json(&report.metrics)
}

fn load_with_context(ckpt: &Path, kg: &OpenKg, cache: Option<&Path>, split: Split) -> Result<(OkgitModel, Option<ContextTable>)> {
    let (model, _) = OkgitModel::load(ckpt, kg)?;
    let ctx = checkpoint_context(&model, kg, cache, &split_queries(kg, split)?)?;
    Ok((model, ctx))
}

pub fn type_eval(a: TypeEvalArgs) -> Result<()> {
    let kg = load_prepared(&a.data)?;
    let (model, ctx) = load_with_context(&a.ckpt, &kg, a.cache.as_deref(), a.split)?;
    if let Some(path) = &a.write_requests {
        let mut text = String::new();
        for (sentence, mention) in typer_requests(&model, &kg, ctx.as_ref(), a.split, a.batch_size)? {
            text.push_str(&format!("{sentence}\t{mention}\n"));
        }
        return write(path, text);
    }
    let typer = TyperResults::load(a.typer.as_deref().expect("clap requires --typer"))?;
    let report = type_compat_f1(&model, &kg, ctx.as_ref(), a.split, &typer, a.batch_size)?;
    let significance = match &a.compare_ckpt {
        Some(dir) => {
            let (other, other_ctx) = load_with_context(dir, &kg, a.compare_cache.as_deref(), a.split)?;
            let theirs = type_compat_f1(&other, &kg, other_ctx.as_ref(), a.split, &typer, a.batch_size)?;
            let (ours, theirs) = report.paired_with(&theirs);
            Some(significance_tests(&theirs, &ours, a.alpha)?)
        }
        None => None,
    };
    let out = json!({
        "config": {
            "checkpoint": a.ckpt,
            "compare_checkpoint": a.compare_ckpt,
            "data": a.data,
            "typer": a.typer,
            "split": a.split,
        },
        "metrics": {
            "f1": report.f1,
            "evaluated": report.evaluated,
            "skipped": report.skipped,
            "significance": significance,
        },
        "per_triple": report.per_prediction,
    });
    if let Some(path) = &a.report {
        write_json(path, &out)?;
    }
    print_json(&out["metrics"])
}

pub fn probe_types(a: ProbeArgs) -> Result<()> {
    let kg = TypedKg::load(&a.triples, &a.types)?;
    let lm = MaskedLanguageModel::load(&a.lm, "probe")?;
    let subset = kg.single_token_subset(&lm);
    let predictions = probe_predictions(&lm, &subset)?;
    let human = a.human.as_deref().map(load_human_annotations).transpose()?;
    let report = freebase_type_probe(&kg, &subset, &predictions, human.as_ref(), a.seed)?;
    let per_triple: Vec<_> = subset
        .iter()
        .zip(&predictions)
        .map(|(t, p)| json!({ "head": t.head, "relation": t.relation, "tail": t.tail, "predicted": p }))
        .collect();
    let out = json!({
        "config": { "triples": a.triples, "types": a.types, "human": a.human, "lm": a.lm, "seed": a.seed },
        "metrics": report,
        "per_triple": per_triple,
    });
    if let Some(path) = &a.report {
        write_json(path, &out)?;
    }
    print_json(&out["metrics"])
}

pub fn run(a: RunArgs) -> Result<()> {
    let manifest = ExperimentManifest::load(&a.manifest)?;
    let outcome = run_manifest(&manifest)?;
    let names = |s: &[okgit::reports::Stage]| s.iter().map(|s| s.name()).collect::<Vec<_>>();
    print_json(&json!({
        "output_dir": outcome.output_dir,
        "manifest_sha256": outcome.manifest_sha256,
        "executed": names(&outcome.executed),
        "skipped": names(&outcome.skipped),
    }))
}

pub fn dump(a: DumpArgs) -> Result<()> {
    let kg = load_prepared(&a.data)?;
    let queries = okgit::reports::dump::parse_queries(&read(&a.queries)?)?;
    let wanted = phrase_queries(&kg, &queries)?;
    let rows_for = |ckpt: &Path, cache: Option<&Path>| -> Result<_> {
        let (model, _) = OkgitModel::load(ckpt, &kg)?;
        let ctx = checkpoint_context(&model, &kg, cache, &wanted)?;
        Ok(dump_topk_predictions(&model, &kg, ctx.as_ref(), &queries, a.k)?)
    };
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string());
    let mut columns = vec![(name(&a.ckpt), rows_for(&a.ckpt, a.cache.as_deref())?)];
    if let Some(dir) = &a.compare_ckpt {
        columns.push((name(dir), rows_for(dir, a.compare_cache.as_deref())?));
    }
    if let Some(path) = &a.json {
        let body: BTreeMap<&str, _> = columns.iter().map(|(n, r)| (n.as_str(), r)).collect();
        write_json(path, &json!({ "k": a.k, "columns": body }))?;
    }
    let refs: Vec<(&str, &[okgit::reports::TopKRow])> = columns.iter().map(|(n, r)| (n.as_str(), r.as_slice())).collect();
    print!("{}", render_side_by_side(&refs)?);
    Ok(())
}

pub fn tsne(a: TsneArgs) -> Result<()> {
    let kg = load_prepared(&a.data)?;
    let (model, _) = OkgitModel::load(&a.ckpt, &kg)?;
    let all = parse_annotations(&kg, &read(&a.annotations)?)?;
    let chosen = select_annotated(&all, a.scan, a.pick, a.seed);
    let opts = TsneOptions {
        perplexity: a.perplexity,
        iterations: a.iterations,
        seed: a.seed,
        ..TsneOptions::default()
    };
    let points = export_tsne(&model, &chosen, a.space, &opts)?;
    write(&a.out, tsne_csv(&points))
}

pub fn np_list(a: NpListArgs) -> Result<()> {
    let kg = load_openkg(&a.data)?;
    let mut text = String::new();
    for id in shuffled_nps(&kg, a.seed) {
        text.push_str(&kg.nps[id as usize]);
        text.push('\n');
    }
    write(&a.out, text)
}
