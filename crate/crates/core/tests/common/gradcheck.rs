//! Central-difference check of full-loss gradients.

use okgit::autodiff::Tape;
use okgit::encoder::{ContextSpec, Mode, ModelConfig, TypeScoreVariant};
use okgit::model::{rng_stream, ContextTable, OkgitModel, Stream};
use okgit::synthetic::ToySpec;
use okgit::training::{batch_loss, parameter_gradients, training_queries, Batch, TrainOptions};

pub fn five_np_spec() -> ToySpec {
    ToySpec {
        num_nps: 5,
        num_rps: 2,
        num_types: 2,
        num_triples: 8,
        valid_fraction: 0.0,
        test_fraction: 0.0,
        paired_clusters: 1,
        seed: 11,
    }
}

/// Gradient norm below which central differences at `h = 1e-5` are
/// dominated by rounding.
const NOISE_FLOOR: f64 = 1e-6;

fn total_loss(model: &OkgitModel, batch: &Batch, ctx: &ContextTable, opts: &TrainOptions) -> f64 {
    let mut tape = Tape::new();
    let mut rng = rng_stream(0, Stream::Training);
    batch_loss(model, &mut tape, batch, Some(ctx), opts, &mut Mode::Train(&mut rng))
        .unwrap()
        .losses
        .total
}

/// Worst per-parameter relative error `‖g − fd‖ / max(‖g‖, ‖fd‖, floor)` between
/// tape gradients and central differences of the full loss.
pub fn worst_relative_error(context: ContextSpec, variant: TypeScoreVariant) -> (String, f64) {
    let (kg, ctx) = super::toy(&five_np_spec());
    let mut cfg = ModelConfig::toy(context).without_dropout();
    cfg.type_score_variant = variant;
    cfg.gamma = 1.3;
    let mut model = OkgitModel::new(&cfg, &kg, None).unwrap();
    let opts = TrainOptions {
        lambda: 0.7,
        ..TrainOptions::default()
    };
    let queries = training_queries(&kg);
    let batch = Batch::new(&queries, kg.num_nps());

    let mut tape = Tape::new();
    let mut rng = rng_stream(0, Stream::Training);
    let loss = batch_loss(&model, &mut tape, &batch, Some(&ctx), &opts, &mut Mode::Train(&mut rng)).unwrap();
    let grads = parameter_gradients(&tape, &loss);

    let ids: Vec<_> = model.params().iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let h = 1e-5;
    let mut worst = (String::new(), 0.0f64);
    for id in ids {
        let name = model.params().param(id).name.clone();
        let shape = model.params().get(id).dim();
        let analytic = grads.get(&id).cloned().unwrap_or_else(|| ndarray::Array2::zeros(shape));
        let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let orig = model.params().get(id)[[i, j]];
                model.params_mut().get_mut(id)[[i, j]] = orig + h;
                let up = total_loss(&model, &batch, &ctx, &opts);
                model.params_mut().get_mut(id)[[i, j]] = orig - h;
                let down = total_loss(&model, &batch, &ctx, &opts);
                model.params_mut().get_mut(id)[[i, j]] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = analytic[[i, j]];
                diff += (a - fd) * (a - fd);
                na += a * a;
                nf += fd * fd;
            }
        }
        // Scale-invariant directions (a normalization layer downstream)
        // have gradients at the level of difference noise; those are
        // measured against the noise floor instead of their own norm.
        let denom = na.sqrt().max(nf.sqrt()).max(NOISE_FLOOR);
        let rel = diff.sqrt() / denom;
        if rel > worst.1 {
            worst = (name, rel);
        }
    }
    worst
}
