//! LM-only baseline, LM initialization and an LM-backed manifest run on the
//! tiny WordPiece fixture.

mod common;

use std::path::PathBuf;

use okgit::dataset::{ClusterMap, OpenKg, Split, Triple};
use okgit::encoder::{ContextSpec, ModelConfig, NpInit, PhraseVocab, WordInit};
use okgit::evaluation::{evaluate_link_prediction, evaluate_lm_baseline, lm_baseline_scores, EvalOptions};
use okgit::lm::{lm_init_vectors, ContextQuery, Direction, MaskedLanguageModel, Prompt};
use okgit::model::{ContextTable, OkgitModel};
use okgit::reports::manifest::{ContextSource, DatasetSource, EvaluationPlan, ReportPlan, TrainingPlan};
use okgit::reports::{run_manifest, ExperimentManifest, Stage};
use okgit::training::{fit, TrainConfig, TrainOptions};

fn tiny_bert() -> (MaskedLanguageModel, PathBuf) {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny-bert");
    (MaskedLanguageModel::load(&dir, "tiny-bert").unwrap(), dir)
}

/// People, cities and years; "new york" is two tokens.
fn small_kg() -> OpenKg {
    let nps = ["bach", "mozart", "einstein", "newton", "paris", "london", "berlin", "new york", "1685", "1756"];
    let rps = ["moved to", "born in"];
    let t = |h, r, t| Triple::new(h, r, t);
    let kg = OpenKg {
        nps: nps.iter().map(|s| s.to_string()).collect(),
        rps: rps.iter().map(|s| s.to_string()).collect(),
        train: vec![t(0, 0, 6), t(1, 0, 5), t(2, 0, 7), t(0, 1, 8), t(1, 1, 9), t(3, 0, 5)],
        valid: vec![t(2, 1, 6)],
        test: vec![t(3, 1, 4), t(1, 0, 4)],
        clusters: ClusterMap::from_assignment(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 8]),
    };
    kg.augment_inverse_relations().unwrap()
}

#[test]
fn baseline_scores_are_mask_logits_of_single_token_nps() {
    let (lm, _) = tiny_bert();
    let kg = small_kg();
    let queries = [(0, 0), (4, 2)];
    let scores = lm_baseline_scores(&lm, &kg, &queries).unwrap();
    for (i, &(np, rp)) in queries.iter().enumerate() {
        let prompt = Prompt::for_query(&kg, ContextQuery::from_augmented(np, rp, 2)).unwrap();
        let full = lm.predict_mask(&prompt, usize::MAX).unwrap();
        for (j, name) in kg.nps.iter().enumerate() {
            let want = full.iter().find(|(_, tok, _)| tok == name).map(|t| f64::from(t.2));
            match want {
                Some(w) => assert!((scores[[i, j]] - w).abs() < 1e-6, "{name}"),
                None => assert_eq!(scores[[i, j]], f64::NEG_INFINITY, "{name}"),
            }
        }
    }
    assert_eq!(scores[[0, 7]], f64::NEG_INFINITY);
}

#[test]
fn baseline_report_ranks_every_test_triple() {
    let (lm, _) = tiny_bert();
    let kg = small_kg();
    let report = evaluate_lm_baseline(&lm, &kg, Split::Test, EvalOptions::default(), serde_json::json!({})).unwrap();
    assert_eq!(report.per_triple.len(), 2);
    let n = kg.clusters.num_clusters();
    assert!(report.per_triple.iter().all(|r| (1..=n).contains(&r.rank_head) && (1..=n).contains(&r.rank_tail)));
}

#[test]
fn init_vectors_are_phrase_vectors() {
    let (lm, _) = tiny_bert();
    let kg = small_kg();
    let init = lm_init_vectors(&lm, &kg).unwrap();
    assert_eq!(init.np.dim(), (10, 16));
    let vocab = PhraseVocab::from_kg(&kg);
    let word = init.word.as_ref().unwrap();
    assert_eq!(word.nrows(), vocab.len());
    assert!(word.row(0).iter().all(|&v| v == 0.0));
    let paris: Vec<f64> = lm.phrase_vector("paris").unwrap().iter().map(|&v| f64::from(v)).collect();
    assert_eq!(init.np.row(4).to_vec(), paris);

    let cfg = ModelConfig {
        d_e: 16,
        d_r: 16,
        d_w: 16,
        np_init: NpInit::Lm,
        word_init: WordInit::Lm,
        ..ModelConfig::toy(ContextSpec::None)
    };
    let model = OkgitModel::new(&cfg, &kg, Some(&init)).unwrap();
    assert_eq!(model.encode_np(4).unwrap(), paris);
}

#[test]
fn lm_context_trains_and_evaluates() {
    let (lm, _) = tiny_bert();
    let kg = small_kg();
    let ctx = ContextTable::from_provider(&lm, &kg, &Split::ALL).unwrap();
    let cfg = TrainConfig {
        model: ModelConfig::toy(ContextSpec::Cached {
            provider: "tiny-bert".into(),
            dim: 16,
        }),
        options: TrainOptions {
            epochs: 2,
            batch_size: 8,
            ..TrainOptions::default()
        },
    };
    let model = fit(&kg, Some(&ctx), &cfg, None, None).unwrap().model;
    let r = evaluate_link_prediction(&model, &kg, Some(&ctx), Split::Test, EvalOptions::default(), serde_json::json!({}))
        .unwrap();
    assert!(r.metrics.metrics.mrr > 0.0);
    let q = ContextQuery { direction: Direction::Tail, np: 0, rp: 0 };
    assert_eq!(ctx.rows_for(&[(0, 0)]).unwrap().row(0).to_vec(), lm
        .mask_vector(&Prompt::for_query(&kg, q).unwrap())
        .unwrap()
        .iter()
        .map(|&v| f64::from(v))
        .collect::<Vec<_>>());
}

#[test]
fn manifest_with_lm_context_and_lm_initialization() {
    let (_, lm_dir) = tiny_bert();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let kg = small_kg();
    kg.save(&data).unwrap();
    let mut model = ModelConfig::toy(ContextSpec::Cached {
        provider: "tiny-bert".into(),
        dim: 16,
    });
    model.d_e = 16;
    model.np_init = NpInit::Lm;
    let m = ExperimentManifest {
        seed: 1,
        dataset: DatasetSource::Openkg { dir: data },
        single_token: None,
        context: ContextSource::Lm {
            model_dir: lm_dir.clone(),
            provider: "tiny-bert".into(),
        },
        init_lm: Some(lm_dir),
        training: TrainingPlan::Single(TrainConfig {
            model,
            options: TrainOptions {
                epochs: 2,
                batch_size: 8,
                ..TrainOptions::default()
            },
        }),
        evaluation: EvaluationPlan::default(),
        reports: ReportPlan::default(),
        output_dir: dir.path().join("run"),
    };
    let out = run_manifest(&m).unwrap();
    assert_eq!(out.executed, Stage::ALL.to_vec());
    assert!(out.output_dir.join("context/tiny-bert.ctx").exists());
    assert!(out.output_dir.join("context/init_vectors.safetensors").exists());
    assert!(out.output_dir.join("reports/eval_test.json").exists());
}
