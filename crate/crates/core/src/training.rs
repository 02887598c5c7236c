//! One-vs-all training with the combined loss, grid search and
//! checkpointing.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataset::{OpenKg, Split};
use crate::encoder::{InitVectors, Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::evaluation::{compute_metrics, rank_split, EvalOptions, Metrics};
use crate::model::{rng_stream, BatchOutput, ContextTable, OkgitModel, Stream};
use crate::params::{Adam, ParamId};

/// Optimization settings stored alongside the model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    /// Weight of the type loss.
    pub lambda: f64,
    pub learning_rate: f64,
    /// Queries per batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub label_smoothing: f64,
    /// Stop after this many validation checks without improvement.
    pub patience: usize,
    /// Epochs between validation checks.
    pub eval_every: usize,
    /// Fraction of original training triples kept (with their inverses).
    pub train_fraction: f64,
    pub filtered_validation: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lambda: 0.001,
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 500,
            label_smoothing: 0.1,
            patience: 20,
            eval_every: 1,
            train_fraction: 1.0,
            filtered_validation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub options: TrainOptions,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.options;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(o.lambda >= 0.0 && o.lambda.is_finite()) {
            return bad("lambda must be a nonnegative real");
        }
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if o.batch_size == 0 || o.eval_every == 0 {
            return bad("batch_size and eval_every must be positive");
        }
        if !(0.0..1.0).contains(&o.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if !(o.train_fraction > 0.0 && o.train_fraction <= 1.0) {
            return bad("train_fraction must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Loss terms of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub triple_loss: f64,
    pub type_loss: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn new(triple_loss: f64, type_loss: f64, lambda: f64) -> Self {
        LossBundle {
            triple_loss,
            type_loss,
            total: triple_loss + lambda * type_loss,
        }
    }
}

/// `(1 − ε) y + ε / N` over the `N` candidates of each row.
pub fn smooth_labels(labels: &Array2<f64>, smoothing: f64) -> Array2<f64> {
    let n = labels.ncols() as f64;
    labels.mapv(|y| (1.0 - smoothing) * y + smoothing / n)
}

const LOG_FLOOR: f64 = 1e-12;

fn bce_mean(logits: &[f64], labels: &[f64], smoothing: f64) -> f64 {
    assert_eq!(logits.len(), labels.len(), "scores and labels differ in length");
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let y = (1.0 - smoothing) * y + smoothing / n;
            let p = 1.0 / (1.0 + (-z).exp());
            let q = 1.0 / (1.0 + z.exp());
            let clamp = |v: f64| if v < LOG_FLOOR { LOG_FLOOR } else { v };
            -(y * clamp(p).ln() + (1.0 - y) * clamp(q).ln())
        })
        .sum::<f64>()
        / n
}

/// Mean binary cross-entropy of `σ(ψ_OKGIT)` over one query's candidates.
pub fn triple_loss(scores: &[f64], labels: &[f64], smoothing: f64) -> f64 {
    bce_mean(scores, labels, smoothing)
}

/// Mean binary cross-entropy of `σ(ψ_TYPE)` over one query's candidates.
pub fn type_loss(psi_type: &[f64], labels: &[f64], smoothing: f64) -> f64 {
    bce_mean(psi_type, labels, smoothing)
}

/// A batch of training queries with their one-vs-all label rows.
pub struct Batch {
    pub queries: Vec<(u32, u32)>,
    pub labels: Array2<f64>,
}

impl Batch {
    pub fn new(queries: &[((u32, u32), Vec<u32>)], num_nps: usize) -> Self {
        let mut labels = Array2::zeros((queries.len(), num_nps));
        for (i, (_, tails)) in queries.iter().enumerate() {
            for &t in tails {
                labels[[i, t as usize]] = 1.0;
            }
        }
        Batch {
            queries: queries.iter().map(|q| q.0).collect(),
            labels,
        }
    }
}

/// Graph of one batch's total loss.
pub struct BatchLoss {
    pub output: BatchOutput,
    pub total: Var,
    pub losses: LossBundle,
}

/// Builds `TripleLoss + λ · TypeLoss` for `batch` on `tape`.
pub fn batch_loss(
    model: &OkgitModel,
    tape: &mut Tape,
    batch: &Batch,
    context: Option<&ContextTable>,
    options: &TrainOptions,
    mode: &mut Mode,
) -> Result<BatchLoss> {
    let output = model.forward(tape, &batch.queries, context, mode)?;
    let targets = smooth_labels(&batch.labels, options.label_smoothing);
    let triple = tape.bce_with_logits_mean(output.psi, &targets);
    let (total, type_value) = match output.psi_type {
        Some(ty) => {
            let type_term = tape.bce_with_logits_mean(ty, &targets);
            let weighted = tape.scale(type_term, options.lambda);
            (tape.add(triple, weighted), tape.value(type_term)[[0, 0]])
        }
        None => (triple, 0.0),
    };
    let losses = LossBundle {
        triple_loss: tape.value(triple)[[0, 0]],
        type_loss: type_value,
        total: tape.value(total)[[0, 0]],
    };
    Ok(BatchLoss { output, total, losses })
}

/// Gradients of `loss.total` with respect to every bound parameter.
pub fn parameter_gradients(tape: &Tape, loss: &BatchLoss) -> HashMap<ParamId, Array2<f64>> {
    let mut grads = tape.backward(loss.total);
    loss.output
        .binder
        .bound()
        .filter_map(|(id, v)| grads.take(v).map(|g| (id, g)))
        .collect()
}

/// Summary of `σ(ψ_TYPE)` over one epoch, split by label.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TypeProbStats {
    pub positive_mean: f64,
    pub positive_max: f64,
    pub negative_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossBundle,
    pub type_prob: Option<TypeProbStats>,
    pub valid: Option<Metrics>,
}

/// Result of [`fit`]: the best-validation model and the training log.
pub struct FitOutcome {
    pub model: OkgitModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid: Option<Metrics>,
}

/// Keeps `fraction` of the original training triples, chosen with the
/// training stream of `seed`, together with their inverse companions.
pub fn downsample_train(kg: &OpenKg, fraction: f64, seed: u64) -> Result<OpenKg> {
    if fraction >= 1.0 {
        return Ok(kg.clone());
    }
    let offset = kg
        .inverse_offset()
        .ok_or_else(|| Error::Invalid("knowledge graph lacks inverse relations".into()))? as u32;
    let mut originals: Vec<(u32, u32, u32)> = kg
        .train
        .iter()
        .filter(|t| t.rp < offset)
        .map(|t| t.key())
        .collect();
    let keep = ((originals.len() as f64) * fraction).round() as usize;
    let mut rng = rng_stream(seed, Stream::Baseline);
    originals.shuffle(&mut rng);
    originals.truncate(keep);
    originals.sort();
    let kept: std::collections::BTreeSet<(u32, u32, u32)> = originals.into_iter().collect();
    let mut out = kg.clone();
    out.train.retain(|t| {
        if t.rp < offset {
            kept.contains(&t.key())
        } else {
            kept.contains(&(t.tail, t.rp - offset, t.head))
        }
    });
    Ok(out)
}

/// One-vs-all training queries of the train split, in sorted order.
pub fn training_queries(kg: &OpenKg) -> Vec<((u32, u32), Vec<u32>)> {
    kg.query_index(Split::Train)
        .into_iter()
        .map(|(q, tails)| (q, tails.into_iter().collect()))
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn write_dump(dir: &Path, epoch: usize, batch: usize, queries: &[(u32, u32)], losses: &LossBundle) -> PathBuf {
    let path = dir.join(format!("nonfinite-epoch{epoch}-batch{batch}.json"));
    let body = serde_json::json!({
        "epoch": epoch,
        "batch": batch,
        "queries": queries,
        "triple_loss": losses.triple_loss.to_string(),
        "type_loss": losses.type_loss.to_string(),
        "total": losses.total.to_string(),
    });
    let _ = std::fs::create_dir_all(dir);
    let _ = std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap_or_default());
    path
}

/// Trains a model on the train split of `kg`, checking validation MRR every
/// `eval_every` epochs and keeping the best parameters. When `out` is given
/// the best checkpoint, `metrics.json` and `train_log.jsonl` are written
/// there.
pub fn fit(
    kg: &OpenKg,
    context: Option<&ContextTable>,
    config: &TrainConfig,
    init: Option<&InitVectors>,
    out: Option<&Path>,
) -> Result<FitOutcome> {
    config.validate()?;
    let opts = &config.options;
    let train_kg = downsample_train(kg, opts.train_fraction, config.model.seed)?;
    let queries = training_queries(&train_kg);
    if queries.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let mut model = OkgitModel::new(&config.model, kg, init)?;
    let mut adam = Adam::new(opts.learning_rate);
    let mut rng = rng_stream(config.model.seed, Stream::Training);
    let has_valid = !kg.valid.is_empty();
    let eval_opts = EvalOptions {
        filtered: opts.filtered_validation,
        ..EvalOptions::default()
    };
    let mut log_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.jsonl");
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut best: Option<(OkgitModel, usize, Option<Metrics>)> = None;
    let mut best_mrr = f64::NEG_INFINITY;
    let mut stagnant = 0;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..queries.len()).collect();
    let n = model.num_nps();
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut weight) = (LossBundle::new(0.0, 0.0, 0.0), 0.0);
        let mut prob = TypeProbStats::default();
        let (mut pos, mut neg) = (0.0f64, 0.0f64);
        for (b, chunk) in order.chunks(opts.batch_size).enumerate() {
            let picked: Vec<_> = chunk.iter().map(|&i| queries[i].clone()).collect();
            let batch = Batch::new(&picked, n);
            let mut tape = Tape::new();
            let loss = batch_loss(&model, &mut tape, &batch, context, opts, &mut Mode::Train(&mut rng))?;
            if !loss.losses.total.is_finite() {
                let dir = out.map(Path::to_path_buf).unwrap_or_else(std::env::temp_dir);
                let dump = write_dump(&dir, epoch, b, &batch.queries, &loss.losses);
                return Err(Error::NonFiniteLoss { epoch, batch: b, dump });
            }
            let w = chunk.len() as f64;
            sum.triple_loss += w * loss.losses.triple_loss;
            sum.type_loss += w * loss.losses.type_loss;
            sum.total += w * loss.losses.total;
            weight += w;
            if let Some(ty) = loss.output.psi_type {
                for (&s, &y) in tape.value(ty).iter().zip(batch.labels.iter()) {
                    let p = sigmoid(s);
                    if y > 0.0 {
                        prob.positive_mean += p;
                        prob.positive_max = prob.positive_max.max(p);
                        pos += 1.0;
                    } else {
                        prob.negative_mean += p;
                        neg += 1.0;
                    }
                }
            }
            let grads = parameter_gradients(&tape, &loss);
            adam.step(model.params_mut(), &grads);
            let updates = loss.output.updates;
            model.apply_bn_updates(&updates);
        }
        prob.positive_mean /= pos.max(1.0);
        prob.negative_mean /= neg.max(1.0);
        let losses = LossBundle {
            triple_loss: sum.triple_loss / weight,
            type_loss: sum.type_loss / weight,
            total: sum.total / weight,
        };
        let check = has_valid && (epoch % opts.eval_every == 0 || epoch == opts.epochs);
        let valid = if check {
            Some(compute_metrics(&rank_split(&model, kg, context, Split::Valid, eval_opts)?)?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            losses,
            type_prob: model.type_head().map(|_| prob),
            valid,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} (triple {:.6}, type {:.6}){}",
            losses.total,
            losses.triple_loss,
            losses.type_loss,
            valid.map(|m| format!(", valid MRR {:.2}", m.mrr)).unwrap_or_default()
        );
        if let Some((f, p)) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(p.as_path(), e))?;
        }
        log.push(entry);
        let mut stop = false;
        if let Some(m) = valid {
            if m.mrr > best_mrr {
                best_mrr = m.mrr;
                stagnant = 0;
                best = Some((model.clone(), epoch, Some(m)));
            } else {
                stagnant += 1;
                stop = stagnant >= opts.patience;
            }
        } else if !has_valid {
            best = Some((model.clone(), epoch, None));
        }
        if stop {
            log::info!("early stop after {stagnant} stagnant validation checks");
            break;
        }
    }
    let (mut model, best_epoch, best_valid) = best.unwrap_or((model, 0, None));
    // Checkpoints store single precision; keep the in-memory model identical.
    model.params_mut().round_to_f32();
    if let Some(dir) = out {
        model.save(dir, Some(opts))?;
        let metrics = serde_json::json!({ "best_epoch": best_epoch, "valid": best_valid });
        let p = dir.join("metrics.json");
        std::fs::write(&p, serde_json::to_string_pretty(&metrics)? + "\n").map_err(|e| Error::io(&p, e))?;
    }
    Ok(FitOutcome {
        model,
        log,
        best_epoch,
        best_valid,
    })
}

/// Hyperparameter ranges; every combination is one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Shared settings; the searched fields are overwritten per point.
    pub base: TrainConfig,
    pub type_dim: Vec<usize>,
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Provider ids, each with the context dimension of its cache.
    pub providers: Vec<(String, usize)>,
}

/// λ values of the standard grid.
pub const GRID_LAMBDA: [f64; 6] = [0.0, 0.001, 0.01, 0.1, 1.0, 10.0];
/// γ values of the standard grid.
pub const GRID_GAMMA: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 5.0];
/// d_τ values of the standard grid.
pub const GRID_TYPE_DIM: [usize; 3] = [100, 300, 500];

impl GridSpec {
    pub fn standard(base: TrainConfig, providers: Vec<(String, usize)>) -> Self {
        GridSpec {
            base,
            type_dim: GRID_TYPE_DIM.to_vec(),
            lambda: GRID_LAMBDA.to_vec(),
            gamma: GRID_GAMMA.to_vec(),
            providers,
        }
    }

    /// Grid points in nested order provider, d_τ, λ, γ.
    pub fn points(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for (provider, dim) in &self.providers {
            for &d in &self.type_dim {
                for &l in &self.lambda {
                    for &g in &self.gamma {
                        let mut c = self.base.clone();
                        c.model.context = crate::encoder::ContextSpec::Cached {
                            provider: provider.clone(),
                            dim: *dim,
                        };
                        c.model.type_dim = d;
                        c.model.gamma = g;
                        c.options.lambda = l;
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

/// Short stable label of a grid point, also its checkpoint directory name.
pub fn point_label(c: &TrainConfig) -> String {
    format!(
        "{}-d{}-l{}-g{}",
        c.model.context.provider_id(),
        c.model.type_dim,
        c.options.lambda,
        c.model.gamma
    )
}

/// One line of the grid leaderboard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub label: String,
    pub config: TrainConfig,
    pub metrics: Option<Metrics>,
    pub best_epoch: usize,
}

pub struct GridOutcome {
    pub best: LeaderboardRow,
    pub best_dir: PathBuf,
    pub rows: Vec<LeaderboardRow>,
}

fn row_key(r: &LeaderboardRow) -> (f64, f64) {
    r.metrics.map(|m| (m.mrr, m.hits10)).unwrap_or((f64::NEG_INFINITY, f64::NEG_INFINITY))
}

/// The best row by validation MRR, then Hits@10, then lexicographically
/// smallest serialized config.
pub fn select_best(rows: &[LeaderboardRow]) -> Option<&LeaderboardRow> {
    rows.iter().max_by(|a, b| {
        let (ka, kb) = (row_key(a), row_key(b));
        ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then_with(|| {
            let ca = serde_json::to_string(&a.config).unwrap_or_default();
            let cb = serde_json::to_string(&b.config).unwrap_or_default();
            cb.cmp(&ca)
        })
    })
}

fn read_leaderboard(path: &Path) -> Result<Vec<LeaderboardRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Trains every grid point under `out/<label>`, appending one leaderboard
/// line per point to `out/leaderboard.jsonl`. Points already on the
/// leaderboard are skipped, so an interrupted search resumes.
pub fn grid_search(
    kg: &OpenKg,
    contexts: &BTreeMap<String, ContextTable>,
    grid: &GridSpec,
    init: Option<&InitVectors>,
    out: &Path,
) -> Result<GridOutcome> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let board = out.join("leaderboard.jsonl");
    let mut rows = read_leaderboard(&board)?;
    for point in grid.points() {
        let label = point_label(&point);
        if rows.iter().any(|r| r.label == label && r.config == point) {
            log::info!("grid point {label} already done");
            continue;
        }
        let provider = point.model.context.provider_id();
        let ctx = contexts
            .get(provider)
            .ok_or_else(|| Error::MissingContext(format!("no context table for provider `{provider}`")))?;
        let fitted = fit(kg, Some(ctx), &point, init, Some(&out.join(&label)))?;
        let row = LeaderboardRow {
            label,
            config: point,
            metrics: fitted.best_valid,
            best_epoch: fitted.best_epoch,
        };
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&board)
            .map_err(|e| Error::io(&board, e))?;
        writeln!(f, "{}", serde_json::to_string(&row)?).map_err(|e| Error::io(&board, e))?;
        rows.push(row);
    }
    let best = select_best(&rows)
        .cloned()
        .ok_or_else(|| Error::Invalid("grid has no points".into()))?;
    let best_dir = out.join(&best.label);
    Ok(GridOutcome { best, best_dir, rows })
}

/// Random `(h, r)` queries of the augmented KG, for tests and probes.
pub fn random_queries(kg: &OpenKg, count: usize, seed: u64) -> Vec<(u32, u32)> {
    let mut rng = rng_stream(seed, Stream::Baseline);
    (0..count)
        .map(|_| (rng.random_range(0..kg.num_nps() as u32), rng.random_range(0..kg.num_rps() as u32)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_scores_give_ln_two() {
        let l = triple_loss(&[0.0; 4], &[1.0, 0.0, 0.0, 0.0], 0.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((type_loss(&[0.0], &[1.0], 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_scores_approach_zero() {
        let l = triple_loss(&[40.0, -40.0, -40.0], &[1.0, 0.0, 0.0], 0.0);
        assert!(l < 1e-15);
        assert!(type_loss(&[-1e6], &[0.0], 0.0) < 1e-15);
    }

    #[test]
    fn clamp_bounds_the_loss() {
        let l = triple_loss(&[-1e6], &[1.0], 0.0);
        assert!((l - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn bundle_total() {
        let b = LossBundle::new(0.7, 0.3, 0.1);
        assert!((b.total - 0.73).abs() < 1e-15);
    }

    #[test]
    fn smoothing_keeps_labels_in_unit_interval() {
        let y = Array2::from_shape_vec((1, 5), vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let s = smooth_labels(&y, 0.1);
        assert!((s[[0, 0]] - 0.92).abs() < 1e-15);
        assert!((s[[0, 1]] - 0.02).abs() < 1e-15);
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standard_grid_size() {
        let g = GridSpec::standard(TrainConfig::default(), vec![("mlm-base".into(), 768)]);
        assert_eq!(g.points().len(), 3 * 6 * 5);
    }

    #[test]
    fn best_row_tie_rules() {
        let m = |mrr, hits10| {
            Some(Metrics {
                mrr,
                mr: 1.0,
                hits1: 0.0,
                hits3: 0.0,
                hits10,
                count: 1,
            })
        };
        let row = |label: &str, gamma, metrics| {
            let mut config = TrainConfig::default();
            config.model.gamma = gamma;
            LeaderboardRow {
                label: label.into(),
                config,
                metrics,
                best_epoch: 1,
            }
        };
        let rows = vec![row("a", 1.0, m(30.0, 40.0)), row("b", 2.0, m(30.0, 41.0)), row("c", 0.5, m(29.0, 60.0))];
        assert_eq!(select_best(&rows).unwrap().label, "b");
        let rows = vec![row("a", 2.0, m(30.0, 40.0)), row("b", 1.0, m(30.0, 40.0))];
        assert_eq!(select_best(&rows).unwrap().label, "b");
    }
}
