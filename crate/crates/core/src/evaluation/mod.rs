//! Cluster-aware link-prediction ranking and metrics, type-compatibility
//! F1, significance tests and the Freebase type probe.

mod probe;
mod stats;
mod typing;

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClusterMap, OpenKg, Split};
use crate::error::{Error, Result};
use crate::lm::{ContextQuery, MaskedLanguageModel, Prompt};
use crate::model::{ContextTable, OkgitModel};

pub use probe::{
    freebase_type_probe, load_human_annotations, probe_predictions, ProbeMethod, ProbeReport, ProbeRow,
    TypedKg, TypedTriple,
};
pub use stats::{paired_permutation_test, paired_t_test, significance_tests, wilcoxon_signed_rank, SignificanceReport};
pub use typing::{
    type_compat_f1, type_f1_term, typer_requests, TypeEvalReport, TypedPrediction, TyperResults, TYPER_TOP_K,
};

/// Every NP id in descending score order, ties by ascending id. Ids in
/// `exclude` are dropped unless equal to `keep`.
pub fn rank_all_nps(scores: ArrayView1<f64>, exclude: &BTreeSet<u32>, keep: u32) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..scores.len() as u32)
        .filter(|i| *i == keep || !exclude.contains(i))
        .collect();
    ids.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
    ids
}

/// Rank of the gold NP's cluster when each cluster is represented by its
/// best-ranked member.
pub fn cluster_rank(ranking: &[u32], clusters: &ClusterMap, gold: u32) -> Result<usize> {
    let target = clusters.cluster_of(gold);
    if !ranking.contains(&gold) {
        return Err(Error::Invalid(format!("gold NP {gold} absent from ranking")));
    }
    let mut seen = BTreeSet::new();
    for &np in ranking {
        let c = clusters.cluster_of(np);
        if c == target {
            break;
        }
        seen.insert(c);
    }
    Ok(seen.len() + 1)
}

/// [`cluster_rank`] of [`rank_all_nps`] in one linear pass. Members of the
/// gold cluster are never filtered: they name the gold entity itself.
pub fn filtered_cluster_rank(scores: ArrayView1<f64>, exclude: &BTreeSet<u32>, gold: u32, clusters: &ClusterMap) -> usize {
    let target = clusters.cluster_of(gold);
    let beats = |a: u32, b: u32| {
        let (sa, sb) = (scores[a as usize], scores[b as usize]);
        sa.total_cmp(&sb).is_gt() || (sa.total_cmp(&sb).is_eq() && a < b)
    };
    let best = clusters
        .members(target)
        .iter()
        .copied()
        .fold(gold, |best, m| if beats(m, best) { m } else { best });
    let mut ahead = BTreeSet::new();
    for np in 0..scores.len() as u32 {
        let c = clusters.cluster_of(np);
        if c != target && !exclude.contains(&np) && beats(np, best) {
            ahead.insert(c);
        }
    }
    ahead.len() + 1
}

/// `exclude` without the members of `gold`'s cluster, the set that
/// [`filtered_cluster_rank`] actually removes.
pub fn competitor_filter(exclude: &BTreeSet<u32>, gold: u32, clusters: &ClusterMap) -> BTreeSet<u32> {
    let target = clusters.cluster_of(gold);
    exclude
        .iter()
        .copied()
        .filter(|&np| clusters.cluster_of(np) != target)
        .collect()
}

/// Head and tail cluster ranks of one evaluation triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankResult {
    pub head: u32,
    pub rp: u32,
    pub tail: u32,
    pub rank_head: usize,
    pub rank_tail: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub mr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub count: usize,
}

/// MRR and Hits@k over both directions, scaled by 100; MR unscaled.
pub fn compute_metrics(ranks: &[RankResult]) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(Error::Invalid("no ranks to aggregate".into()));
    }
    let all: Vec<f64> = ranks
        .iter()
        .flat_map(|r| [r.rank_head as f64, r.rank_tail as f64])
        .collect();
    let n = all.len() as f64;
    let hits = |k: f64| 100.0 * all.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(Metrics {
        mrr: 100.0 * all.iter().map(|r| 1.0 / r).sum::<f64>() / n,
        mr: all.iter().sum::<f64>() / n,
        hits1: hits(1.0),
        hits3: hits(3.0),
        hits10: hits(10.0),
        count: ranks.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub filtered: bool,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            filtered: true,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub split: Split,
    pub mode: String,
    pub metrics: Metrics,
}

/// Link-prediction report: `config`, `metrics`, `per_triple`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: serde_json::Value,
    pub metrics: EvalSummary,
    pub per_triple: Vec<RankResult>,
}

/// Original (non-inverse) triples of a split of an inverse-augmented KG.
pub fn original_triples(kg: &OpenKg, split: Split) -> Result<Vec<(u32, u32, u32)>> {
    let offset = kg
        .inverse_offset()
        .ok_or_else(|| Error::Invalid("knowledge graph lacks inverse relations".into()))?;
    Ok(kg
        .split(split)
        .iter()
        .filter(|t| (t.rp as usize) < offset)
        .map(|t| t.key())
        .collect())
}

/// Streams evaluation-mode `ψ_OKGIT` rows for `queries` in batches.
pub fn for_each_score_row(
    model: &OkgitModel,
    context: Option<&ContextTable>,
    queries: &[(u32, u32)],
    batch_size: usize,
    mut f: impl FnMut(usize, ArrayView1<f64>) -> Result<()>,
) -> Result<()> {
    for (b, chunk) in queries.chunks(batch_size.max(1)).enumerate() {
        let scores = model.score_queries(chunk, context)?;
        for (i, row) in scores.okgit.rows().into_iter().enumerate() {
            f(b * batch_size.max(1) + i, row)?;
        }
    }
    Ok(())
}

/// Cluster ranks of every triple of `split` against all NPs, both
/// directions.
pub fn rank_split(
    model: &OkgitModel,
    kg: &OpenKg,
    context: Option<&ContextTable>,
    split: Split,
    options: EvalOptions,
) -> Result<Vec<RankResult>> {
    rank_split_with(kg, split, options, |chunk| Ok(model.score_queries(chunk, context)?.okgit))
}

/// [`rank_split`] for any scorer mapping a batch of `(np, rp)` queries of
/// the augmented KG to one row of NP scores per query.
pub fn rank_split_with(
    kg: &OpenKg,
    split: Split,
    options: EvalOptions,
    mut score: impl FnMut(&[(u32, u32)]) -> Result<Array2<f64>>,
) -> Result<Vec<RankResult>> {
    let triples = original_triples(kg, split)?;
    let offset = kg.inverse_offset().expect("checked by original_triples") as u32;
    let known = kg.known_answers();
    let empty = BTreeSet::new();
    let mut queries = Vec::with_capacity(triples.len() * 2);
    for &(h, r, t) in &triples {
        queries.push((h, r));
        queries.push((t, r + offset));
    }
    let batch = options.batch_size.max(1);
    let mut ranks = vec![0usize; queries.len()];
    for (b, chunk) in queries.chunks(batch).enumerate() {
        let scores = score(chunk)?;
        for (j, row) in scores.rows().into_iter().enumerate() {
            let i = b * batch + j;
            let (h, r, t) = triples[i / 2];
            let (q, gold) = if i % 2 == 0 { ((h, r), t) } else { ((t, r + offset), h) };
            let exclude = if options.filtered {
                known.get(&q).unwrap_or(&empty)
            } else {
                &empty
            };
            ranks[i] = filtered_cluster_rank(row, exclude, gold, &kg.clusters);
        }
    }
    Ok(triples
        .iter()
        .enumerate()
        .map(|(i, &(head, rp, tail))| RankResult {
            head,
            rp,
            tail,
            rank_tail: ranks[2 * i],
            rank_head: ranks[2 * i + 1],
        })
        .collect())
}

/// Scores of the LM-only baseline: each NP that is a single vocabulary token
/// gets that token's masked-LM logit; every other NP scores `-∞`.
pub fn lm_baseline_scores(lm: &MaskedLanguageModel, kg: &OpenKg, queries: &[(u32, u32)]) -> Result<Array2<f64>> {
    let offset = kg
        .inverse_offset()
        .ok_or_else(|| Error::Invalid("knowledge graph lacks inverse relations".into()))?;
    let tokens: Vec<Option<u32>> = kg.nps.iter().map(|p| lm.single_token_id(p)).collect();
    let mut out = Array2::from_elem((queries.len(), kg.num_nps()), f64::NEG_INFINITY);
    for (i, &(np, rp)) in queries.iter().enumerate() {
        let prompt = Prompt::for_query(kg, ContextQuery::from_augmented(np, rp, offset))?;
        let logits = lm.mask_logits(&prompt)?;
        for (j, tok) in tokens.iter().enumerate() {
            if let Some(t) = tok {
                out[[i, j]] = f64::from(logits[*t as usize]);
            }
        }
    }
    Ok(out)
}

/// Link-prediction report for the LM-only baseline.
pub fn evaluate_lm_baseline(
    lm: &MaskedLanguageModel,
    kg: &OpenKg,
    split: Split,
    options: EvalOptions,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let per_triple = rank_split_with(kg, split, options, |chunk| lm_baseline_scores(lm, kg, chunk))?;
    report(per_triple, split, options, config)
}

fn report(per_triple: Vec<RankResult>, split: Split, options: EvalOptions, config: serde_json::Value) -> Result<EvalReport> {
    let metrics = compute_metrics(&per_triple)?;
    Ok(EvalReport {
        config,
        metrics: EvalSummary {
            split,
            mode: if options.filtered { "filtered" } else { "unfiltered" }.to_string(),
            metrics,
        },
        per_triple,
    })
}

/// Ranks `split`, aggregates metrics and echoes `config` into the report.
pub fn evaluate_link_prediction(
    model: &OkgitModel,
    kg: &OpenKg,
    context: Option<&ContextTable>,
    split: Split,
    options: EvalOptions,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let per_triple = rank_split(model, kg, context, split, options)?;
    report(per_triple, split, options, config)
}

/// Highest-scoring NP per query, unfiltered, ties by ascending id.
pub fn top1_predictions(
    model: &OkgitModel,
    context: Option<&ContextTable>,
    queries: &[(u32, u32)],
    batch_size: usize,
) -> Result<Vec<u32>> {
    let mut out = vec![0u32; queries.len()];
    for_each_score_row(model, context, queries, batch_size, |i, row| {
        out[i] = argmax(row);
        Ok(())
    })?;
    Ok(out)
}

pub(crate) fn argmax(row: ArrayView1<f64>) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v.total_cmp(&row[best]).is_gt() {
            best = i;
        }
    }
    best as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn rr(rank_head: usize, rank_tail: usize) -> RankResult {
        RankResult {
            head: 0,
            rp: 0,
            tail: 0,
            rank_head,
            rank_tail,
        }
    }

    #[test]
    fn ranking_orders_by_score_then_id() {
        let s = arr1(&[0.9, 0.1, 0.5]);
        assert_eq!(rank_all_nps(s.view(), &BTreeSet::new(), 0), vec![0, 2, 1]);
        let tied = arr1(&[0.2, 0.7, 0.7, 0.2]);
        assert_eq!(rank_all_nps(tied.view(), &BTreeSet::new(), 0), vec![1, 2, 0, 3]);
    }

    #[test]
    fn filtering_removes_competitors_but_not_gold() {
        let s = arr1(&[0.9, 0.1, 0.5, 0.7]);
        let exclude = BTreeSet::from([0, 2]);
        assert_eq!(rank_all_nps(s.view(), &exclude, 2), vec![3, 2, 1]);
        let c = ClusterMap::singletons(4);
        assert_eq!(filtered_cluster_rank(s.view(), &BTreeSet::new(), 2, &c), 3);
        assert_eq!(filtered_cluster_rank(s.view(), &BTreeSet::from([0]), 2, &c), 2);
    }

    #[test]
    fn cluster_rank_hand_trace() {
        // clusters {a, b} = {0, 1}, {c, d} = {2, 3}; order (c, a, d, b)
        let c = ClusterMap::from_assignment(&[0, 0, 1, 1]);
        assert_eq!(cluster_rank(&[2, 0, 3, 1], &c, 1).unwrap(), 2);
        assert_eq!(cluster_rank(&[0, 2, 3, 1], &c, 1).unwrap(), 1);
        assert!(cluster_rank(&[2, 0, 3], &c, 1).is_err());
    }

    #[test]
    fn metric_arithmetic() {
        let m = compute_metrics(&[rr(1, 1)]).unwrap();
        assert_eq!((m.mrr, m.mr, m.hits1, m.hits10), (100.0, 1.0, 100.0, 100.0));
        let m = compute_metrics(&[rr(1, 2)]).unwrap();
        assert_eq!((m.mrr, m.mr, m.hits1, m.hits3), (75.0, 1.5, 50.0, 100.0));
        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_id_on_ties() {
        assert_eq!(argmax(arr1(&[0.1, 0.4, 0.4]).view()), 1);
    }
}
