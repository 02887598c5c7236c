mod common;

use common::gradcheck;
use okgit::encoder::{ContextSpec, TypeScoreVariant};

#[test]
fn full_loss_gradients_match_finite_differences_cached_euclid() {
    let (name, err) = gradcheck::worst_relative_error(common::oracle_context(), TypeScoreVariant::Euclid);
    assert!(err < 1e-4, "{name}: relative error {err:e}");
}

#[test]
fn full_loss_gradients_match_finite_differences_cached_dot() {
    let (name, err) = gradcheck::worst_relative_error(common::oracle_context(), TypeScoreVariant::Dot);
    assert!(err < 1e-4, "{name}: relative error {err:e}");
}

#[test]
fn full_loss_gradients_match_finite_differences_live_contexts() {
    for ctx in [ContextSpec::Concat, ContextSpec::Add, ContextSpec::None] {
        let (name, err) = gradcheck::worst_relative_error(ctx.clone(), TypeScoreVariant::Euclid);
        assert!(err < 1e-4, "{ctx:?} {name}: relative error {err:e}");
    }
}
