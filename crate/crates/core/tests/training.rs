mod common;

use okgit::dataset::Split;
use okgit::encoder::ContextSpec;
use okgit::model::{ContextTable, OkgitModel};
use okgit::synthetic::ToySpec;
use okgit::training::{fit, grid_search, random_queries, GridSpec};
use okgit::Error;

fn twenty_np() -> ToySpec {
    ToySpec::default()
}

#[test]
fn training_loss_decreases_over_first_ten_epochs() {
    let (kg, ctx) = common::toy(&twenty_np());
    let mut cfg = common::toy_train_config(common::oracle_context(), 10);
    cfg.options.batch_size = 128;
    let out = fit(&kg, Some(&ctx), &cfg, None, None).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|e| e.losses.total).collect();
    assert_eq!(losses.len(), 10);
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "loss went up: {losses:?}");
    }
}

#[test]
fn zero_gamma_and_lambda_follow_the_care_trajectory() {
    let (kg, ctx, oracle) = common::toy_with_oracle(&twenty_np());
    let mut okgit = common::toy_train_config(common::oracle_context(), 3);
    okgit.model.gamma = 0.0;
    okgit.options.lambda = 0.0;
    let mut care = okgit.clone();
    care.model.context = ContextSpec::None;
    let a = fit(&kg, Some(&ctx), &okgit, None, None).unwrap().model;
    let b = fit(&kg, None, &care, None, None).unwrap().model;
    let queries = random_queries(&kg, 1000, 5);
    let any = common::table_for(&kg, &oracle, &queries);
    let sa = a.score_queries(&queries, Some(&any)).unwrap();
    let sb = b.score_queries(&queries, None).unwrap();
    assert!(sb.type_.is_none());
    let worst = sa
        .okgit
        .iter()
        .zip(sb.okgit.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "max score difference {worst:e}");
    for (name, p) in b.params().iter().map(|(_, p)| (&p.name, &p.value)) {
        assert_eq!(a.params().by_name(name).unwrap(), p, "{name} diverged");
    }
}

#[test]
fn checkpoint_round_trip_preserves_scores() {
    let (kg, ctx) = common::toy(&twenty_np());
    let cfg = common::toy_train_config(common::oracle_context(), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = fit(&kg, Some(&ctx), &cfg, None, Some(dir.path())).unwrap();
    let (loaded, meta) = OkgitModel::load(dir.path(), &kg).unwrap();
    assert_eq!(meta.training.as_ref(), Some(&cfg.options));
    let q: Vec<(u32, u32)> = kg.train.iter().take(50).map(|t| (t.head, t.rp)).collect();
    let s1 = out.model.score_queries(&q, Some(&ctx)).unwrap();
    let s2 = loaded.score_queries(&q, Some(&ctx)).unwrap();
    assert_eq!(s1.okgit, s2.okgit);
    assert!(dir.path().join("train_log.jsonl").exists());
    assert!(dir.path().join("metrics.json").exists());
}

#[test]
fn repeated_runs_write_identical_checkpoints() {
    let (kg, ctx) = common::toy(&twenty_np());
    let cfg = common::toy_train_config(common::oracle_context(), 2);
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    fit(&kg, Some(&ctx), &cfg, None, Some(d1.path())).unwrap();
    fit(&kg, Some(&ctx), &cfg, None, Some(d2.path())).unwrap();
    for f in ["params.bin", "config.json", "metrics.json", "train_log.jsonl"] {
        let a = std::fs::read(d1.path().join(f)).unwrap();
        let b = std::fs::read(d2.path().join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
}

#[test]
fn non_finite_context_aborts_with_a_dump() {
    let (kg, _) = common::toy(&twenty_np());
    let queries = okgit::lm::required_queries(&kg, &Split::ALL).unwrap();
    let bad = ContextTable::from_fn(&kg, &queries, common::ORACLE_DIM, "type-oracle", |_| {
        Ok(vec![f32::NAN; common::ORACLE_DIM])
    })
    .unwrap();
    let cfg = common::toy_train_config(common::oracle_context(), 1);
    let dir = tempfile::tempdir().unwrap();
    match fit(&kg, Some(&bad), &cfg, None, Some(dir.path())) {
        Err(Error::NonFiniteLoss { epoch, dump, .. }) => {
            assert_eq!(epoch, 1);
            assert!(dump.exists());
        }
        other => panic!("expected a non-finite loss error, got {:?}", other.err()),
    }
}

#[test]
fn context_from_another_provider_is_rejected() {
    let (kg, ctx) = common::toy(&twenty_np());
    let mut cfg = common::toy_train_config(common::oracle_context(), 1);
    cfg.model.context = ContextSpec::Cached {
        provider: "mlm-base".into(),
        dim: common::ORACLE_DIM,
    };
    assert!(fit(&kg, Some(&ctx), &cfg, None, None).is_err());
    assert!(fit(&kg, None, &common::toy_train_config(common::oracle_context(), 1), None, None).is_err());
}

#[test]
fn grid_search_covers_every_point_and_resumes() {
    let (kg, ctx) = common::toy(&twenty_np());
    let base = common::toy_train_config(common::oracle_context(), 1);
    let grid = GridSpec {
        base,
        type_dim: vec![2, 4],
        lambda: vec![0.0, 0.1],
        gamma: vec![0.5],
        providers: vec![("type-oracle".into(), common::ORACLE_DIM)],
    };
    let contexts = [("type-oracle".to_string(), ctx)].into_iter().collect();
    let dir = tempfile::tempdir().unwrap();
    let first = grid_search(&kg, &contexts, &grid, None, dir.path()).unwrap();
    assert_eq!(first.rows.len(), 2 * 2);
    assert!(first.best_dir.join("params.bin").exists());
    let board = std::fs::read_to_string(dir.path().join("leaderboard.jsonl")).unwrap();
    assert_eq!(board.lines().count(), 4);
    let again = grid_search(&kg, &contexts, &grid, None, dir.path()).unwrap();
    assert_eq!(again.best, first.best);
    let board2 = std::fs::read_to_string(dir.path().join("leaderboard.jsonl")).unwrap();
    assert_eq!(board, board2);

    let one = GridSpec {
        type_dim: vec![4],
        lambda: vec![0.1],
        ..grid
    };
    let solo = grid_search(&kg, &contexts, &one, None, tempfile::tempdir().unwrap().path()).unwrap();
    assert_eq!(solo.rows.len(), 1);
    assert_eq!(solo.best.config, one.points()[0]);
}
