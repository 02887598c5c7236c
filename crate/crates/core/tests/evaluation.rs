mod common;

use std::collections::BTreeSet;

use ndarray::Array1;
use okgit::dataset::{ClusterMap, Split};
use okgit::evaluation::{
    cluster_rank, competitor_filter, compute_metrics, evaluate_link_prediction, filtered_cluster_rank, rank_all_nps, rank_split,
    EvalOptions, RankResult,
};
use okgit::synthetic::ToySpec;
use okgit::training::fit;
use proptest::prelude::*;

use common::oracle;

/// Scores on a coarse grid so ties are frequent.
fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u32>, Vec<bool>, usize)> {
    (1usize..=30).prop_flat_map(|n| {
        (
            prop::collection::vec((0i32..8).prop_map(|s| s as f64 * 0.25), n),
            prop::collection::vec(0u32..n as u32, n),
            prop::collection::vec(prop::bool::weighted(0.2), n),
            0..n,
        )
    })
}

fn as_parts(labels: &[u32], excluded: &[bool]) -> (ClusterMap, BTreeSet<u32>) {
    let map = ClusterMap::from_assignment(&labels.iter().map(|&l| l as u64).collect::<Vec<_>>());
    let ex = excluded.iter().enumerate().filter(|(_, &e)| e).map(|(i, _)| i as u32).collect();
    (map, ex)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn cluster_rank_matches_two_pass_oracle((scores, labels, excluded, gold) in instance()) {
        let (clusters, exclude) = as_parts(&labels, &excluded);
        let want = oracle::cluster_rank(&scores, &labels, &excluded, gold);
        let view = Array1::from(scores.clone());
        let competitors = competitor_filter(&exclude, gold as u32, &clusters);
        let ranking = rank_all_nps(view.view(), &competitors, gold as u32);
        prop_assert_eq!(cluster_rank(&ranking, &clusters, gold as u32).unwrap(), want);
        prop_assert_eq!(filtered_cluster_rank(view.view(), &exclude, gold as u32, &clusters), want);
        prop_assert!(want <= clusters.num_clusters());
    }

    #[test]
    fn filtered_rank_never_exceeds_unfiltered((scores, labels, excluded, gold) in instance()) {
        let (clusters, exclude) = as_parts(&labels, &excluded);
        let view = Array1::from(scores);
        let filtered = filtered_cluster_rank(view.view(), &exclude, gold as u32, &clusters);
        let raw = filtered_cluster_rank(view.view(), &BTreeSet::new(), gold as u32, &clusters);
        prop_assert!(filtered <= raw);
    }

    #[test]
    fn metrics_match_oracle_and_ignore_order(
        ranks in prop::collection::vec((1usize..40, 1usize..40), 1..60),
        rotate in 0usize..60,
    ) {
        let rows: Vec<RankResult> = ranks
            .iter()
            .enumerate()
            .map(|(i, &(h, t))| RankResult { head: i as u32, rp: 0, tail: 0, rank_head: h, rank_tail: t })
            .collect();
        let m = compute_metrics(&rows).unwrap();
        let want = oracle::metrics(&ranks);
        prop_assert_eq!([m.mrr, m.mr, m.hits1, m.hits3, m.hits10], want);
        prop_assert!(m.mrr <= 100.0 && m.mr >= 1.0);
        prop_assert!(m.hits1 <= m.hits3 && m.hits3 <= m.hits10);
        let mut shuffled = rows.clone();
        shuffled.reverse();
        let k = rotate % shuffled.len();
        shuffled.rotate_left(k);
        let m2 = compute_metrics(&shuffled).unwrap();
        prop_assert!((m.mrr - m2.mrr).abs() < 1e-9 && (m.mr - m2.mr).abs() < 1e-9);
        prop_assert_eq!([m.hits1, m.hits3, m.hits10], [m2.hits1, m2.hits3, m2.hits10]);
    }
}

#[test]
fn filtering_one_competitor_improves_rank_by_one() {
    let scores = Array1::from(vec![0.9, 0.8, 0.1, 0.5]);
    let clusters = ClusterMap::singletons(4);
    let raw = filtered_cluster_rank(scores.view(), &BTreeSet::new(), 3, &clusters);
    let filtered = filtered_cluster_rank(scores.view(), &BTreeSet::from([1]), 3, &clusters);
    assert_eq!((raw, filtered), (3, 2));
}

#[test]
fn toy_ranks_agree_with_exhaustive_rescoring() {
    let (kg, ctx) = common::toy(&ToySpec::default());
    let cfg = common::toy_train_config(common::oracle_context(), 3);
    let model = fit(&kg, Some(&ctx), &cfg, None, None).unwrap().model;
    let offset = kg.inverse_offset().unwrap() as u32;
    let known = kg.known_answers();
    let labels: Vec<u32> = kg.clusters.assignment().to_vec();
    for filtered in [true, false] {
        let options = EvalOptions { filtered, batch_size: 7 };
        let ranks = rank_split(&model, &kg, Some(&ctx), Split::Test, options).unwrap();
        assert!(!ranks.is_empty());
        for r in &ranks {
            for (q, gold, got) in [
                ((r.head, r.rp), r.tail, r.rank_tail),
                ((r.tail, r.rp + offset), r.head, r.rank_head),
            ] {
                let scores = model.score_queries(&[q], Some(&ctx)).unwrap().okgit.row(0).to_vec();
                let mut excluded = vec![false; scores.len()];
                if filtered {
                    for &np in known.get(&q).into_iter().flatten() {
                        excluded[np as usize] = true;
                    }
                }
                assert_eq!(got, oracle::cluster_rank(&scores, &labels, &excluded, gold as usize));
            }
        }
    }
}

#[test]
fn evaluation_reports_are_deterministic_and_labelled() {
    let (kg, ctx) = common::toy(&ToySpec::default());
    let cfg = common::toy_train_config(common::oracle_context(), 2);
    let model = fit(&kg, Some(&ctx), &cfg, None, None).unwrap().model;
    let config = serde_json::to_value(&cfg).unwrap();
    let run = |filtered| {
        let options = EvalOptions { filtered, ..EvalOptions::default() };
        evaluate_link_prediction(&model, &kg, Some(&ctx), Split::Test, options, config.clone()).unwrap()
    };
    let a = serde_json::to_string(&run(true)).unwrap();
    let b = serde_json::to_string(&run(true)).unwrap();
    assert_eq!(a, b);
    let raw = run(false);
    let filt = run(true);
    assert_eq!((filt.metrics.mode.as_str(), raw.metrics.mode.as_str()), ("filtered", "unfiltered"));
    for (f, u) in filt.per_triple.iter().zip(&raw.per_triple) {
        assert!(f.rank_head <= u.rank_head && f.rank_tail <= u.rank_tail);
    }
    let n_clusters = kg.clusters.num_clusters();
    assert!(raw.per_triple.iter().all(|r| r.rank_head >= 1 && r.rank_tail <= n_clusters));
}

#[test]
fn missing_context_rows_are_reported() {
    let (kg, _) = common::toy(&ToySpec::default());
    let (_, _, oracle) = common::toy_with_oracle(&ToySpec::default());
    let train_only: Vec<(u32, u32)> = kg.train.iter().map(|t| (t.head, t.rp)).collect();
    let partial = common::table_for(&kg, &oracle, &train_only);
    let cfg = common::toy_train_config(common::oracle_context(), 1);
    let model = okgit::model::OkgitModel::new(&cfg.model, &kg, None).unwrap();
    let err = rank_split(&model, &kg, Some(&partial), Split::Test, EvalOptions::default()).unwrap_err();
    assert!(err.to_string().contains("missing"), "{err}");
}
