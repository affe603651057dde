mod common;

use common::*;
use iris::dataset::TrainInstance;
use iris::features::{zero_fill_modality, Modality};
use iris::model::{ModelShape, Variant};
use iris::training::{
    backward, compare_gradients, finite_difference_check, initialize, loss_bpr, loss_mse, loss_pointwise_log,
    regularization_term, train, Batch, GradCheckOptions, LossKind, Objective, StopReason, TrainOptions,
};
use iris::Error;

#[test]
fn pointwise_log_hand_values() {
    let (split, store) = tiny_corpus(3);
    let hp = small_hp();
    let mut params = probe(Variant::Fism, &hp, &split, &store, 1);
    params.history_embeddings.fill(0.0);
    let hp = iris::model::Hyperparams {
        lambdas: [0.0; 4],
        ..hp
    };
    let user = 0;
    let pos = split.train.positives(user)[0];
    let neg = (0..split.num_items()).find(|&i| !split.full.contains(user, i)).unwrap();
    for (item, label) in [(pos, 1), (neg, 0)] {
        let (loss, probs) =
            loss_pointwise_log(&[TrainInstance { user, item, label }], &params, &hp, &split, None).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15, "{loss}");
        assert_eq!(probs, vec![0.5]);
    }
}

#[test]
fn mse_hand_values() {
    let (split, store) = tiny_corpus(3);
    let hp = iris::model::Hyperparams {
        lambdas: [0.0; 4],
        ..small_hp()
    };
    let mut params = probe(Variant::Fism, &hp, &split, &store, 1);
    params.history_embeddings.fill(0.0);
    let user = 0;
    let pos = split.train.positives(user)[0];
    let neg = (0..split.num_items()).find(|&i| !split.full.contains(user, i)).unwrap();
    let one = |item, label| TrainInstance { user, item, label };
    // every score is 0, so the errors are the labels themselves
    assert_eq!(loss_mse(&[one(pos, 1)], &params, &hp, &split, None).unwrap(), 0.5);
    assert_eq!(loss_mse(&[one(neg, 0)], &params, &hp, &split, None).unwrap(), 0.0);
    assert_eq!(
        loss_mse(&[one(pos, 1), one(pos, 1)], &params, &hp, &split, None).unwrap(),
        1.0
    );
}

#[test]
fn bpr_tied_pair_and_preconditions() {
    let (split, store) = tiny_corpus(3);
    let hp = iris::model::Hyperparams {
        lambdas: [0.0; 4],
        ..small_hp()
    };
    let mut params = probe(Variant::Fism, &hp, &split, &store, 1);
    params.target_embeddings.fill(0.0);
    let triples = pairwise_batch(&split, 5);
    let loss = loss_bpr(&triples, &params, &hp, &split, None).unwrap();
    assert!((loss - 5.0 * 2f64.ln()).abs() < 1e-12, "{loss}");
    let mut bad = triples[0];
    bad.negative = bad.positive;
    assert!(matches!(
        loss_bpr(&[bad], &params, &hp, &split, None),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn wrong_batch_shape_is_rejected() {
    let (split, store) = tiny_corpus(3);
    let hp = small_hp();
    let params = probe(Variant::Fism, &hp, &split, &store, 1);
    let points = pointwise_batch(&split, 4);
    let triples = pairwise_batch(&split, 4);
    assert!(backward(Batch::Pointwise(&points), LossKind::Bpr, &params, &hp, &split, None).is_err());
    assert!(backward(Batch::Pairwise(&triples), LossKind::Mse, &params, &hp, &split, None).is_err());
    assert!(backward(Batch::Pointwise(&[]), LossKind::Mse, &params, &hp, &split, None).is_err());
}

/// With P = Q = 0 every score is constant, so the data term has no gradient
/// and only the penalty remains.
#[test]
fn regularization_only_gradients() {
    let (split, store) = tiny_corpus(4);
    let hp = small_hp().smooth();
    let batch = pointwise_batch(&split, 32);
    for variant in Variant::ALL.into_iter().filter(|v| *v != Variant::BiasBaseline) {
        let mut params = probe(variant, &hp, &split, &store, 2);
        params.history_embeddings.fill(0.0);
        params.target_embeddings.fill(0.0);
        let grads = backward(
            Batch::Pointwise(&batch),
            LossKind::PointwiseLog,
            &params,
            &hp,
            &split,
            Some(&store),
        )
        .unwrap();
        for (t, g) in params.tensors().iter().zip(grads.0.tensors()) {
            let lambda = iris::model::regularization_group(t.name).map_or(0.0, |k| hp.lambdas[k]);
            for (x, dx) in t.data.iter().zip(g.data) {
                assert!(
                    (dx - 2.0 * lambda * x).abs() <= 1e-15,
                    "{variant} {}: {dx} vs {}",
                    t.name,
                    2.0 * lambda * x
                );
            }
        }
        let report = finite_difference_check(
            &params,
            &hp,
            Batch::Pointwise(&batch),
            LossKind::PointwiseLog,
            &split,
            Some(&store),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}

#[test]
fn negated_share_gradient_fails_on_share_only() {
    let (split, store) = tiny_corpus(3);
    let hp = small_hp().smooth();
    let params = probe(Variant::MultimodalIris, &hp, &split, &store, 5);
    let batch = pointwise_batch(&split, 32);
    let objective = Objective::new(LossKind::PointwiseLog);
    let (_, mut grads) = objective
        .gradient(Batch::Pointwise(&batch), &params, &hp, &split, Some(&store))
        .unwrap();
    grads
        .tensor_mut("feat.W_share")
        .unwrap()
        .iter_mut()
        .for_each(|g| *g = -*g);
    let report = compare_gradients(
        &params,
        &grads,
        |p| {
            let e = objective.evaluate(Batch::Pointwise(&batch), p, &hp, &split, Some(&store))?;
            Ok(vec![e.loss.data, e.loss.regularization])
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert_eq!(report.failing(), vec!["feat.W_share"]);
    let err = report.into_result().unwrap_err();
    assert!(matches!(&err, Error::GradientCheck(_)));
    assert!(err.to_string().contains("feat.W_share"), "{err}");
}

#[test]
fn small_step_does_not_increase_the_objective() {
    let (split, store) = tiny_corpus(6);
    let hp = small_hp();
    let points = pointwise_batch(&split, 10_000);
    let triples = pairwise_batch(&split, 10_000);
    for variant in Variant::ALL {
        for loss in [LossKind::PointwiseLog, LossKind::Mse, LossKind::Bpr] {
            let batch = if loss.is_pairwise() {
                Batch::Pairwise(&triples)
            } else {
                Batch::Pointwise(&points)
            };
            let objective = Objective::new(loss);
            let mut params = probe(variant, &hp, &split, &store, 8);
            let (before, grads) = objective.gradient(batch, &params, &hp, &split, Some(&store)).unwrap();
            for ((_, theta), t) in params.tensors_mut().into_iter().zip(grads.0.tensors()) {
                theta.iter_mut().zip(t.data).for_each(|(x, g)| *x -= 1e-6 * g);
            }
            let after = objective.evaluate(batch, &params, &hp, &split, Some(&store)).unwrap();
            assert!(
                after.loss.total() <= before.loss.total(),
                "{variant} {loss}: {} -> {}",
                before.loss.total(),
                after.loss.total()
            );
        }
    }
}

#[test]
fn penalty_depends_only_on_listed_tensors() {
    let (split, store) = tiny_corpus(3);
    let hp = small_hp();
    let mut params = probe(Variant::MultimodalIris, &hp, &split, &store, 1);
    let base = regularization_term(&params, &hp);
    let irn = params.irn.as_mut().unwrap();
    irn.h.iter_mut().for_each(|x| *x += 1.0);
    irn.b.iter_mut().for_each(|x| *x += 1.0);
    assert_eq!(regularization_term(&params, &hp), base);
}

#[test]
fn zero_epochs_return_the_initialisation() {
    let (split, store) = tiny_corpus(3);
    let hp = small_hp();
    let options = TrainOptions {
        max_epochs: 0,
        ..TrainOptions::default()
    };
    let (params, report) = train(&split, Some(&store), &hp, Variant::ImageIris, &options).unwrap();
    let shape = ModelShape::for_data(
        Variant::ImageIris,
        &hp,
        split.num_users(),
        split.num_items(),
        Some(&store),
    );
    assert_eq!(params, initialize(shape, hp.seed));
    assert!(report.epochs.is_empty());
    assert_eq!(report.best_epoch, None);
}

#[test]
fn frozen_learning_rate_stops_after_two_epochs() {
    let (split, store) = trainable_corpus(3);
    let hp = iris::model::Hyperparams {
        learning_rate: 0.0,
        ..small_hp()
    };
    let options = TrainOptions {
        max_epochs: 20,
        patience: 1,
        ..TrainOptions::default()
    };
    let (_, report) = train(&split, Some(&store), &hp, Variant::Nais, &options).unwrap();
    assert_eq!(report.epochs.len(), 2);
    assert_eq!(report.stop_reason, StopReason::EarlyStopped);
    assert_eq!(report.best_epoch, Some(1));
}

#[test]
fn training_is_deterministic_per_seed() {
    let (split, store) = trainable_corpus(3);
    let hp = small_hp();
    let options = TrainOptions {
        max_epochs: 3,
        patience: 0,
        ..TrainOptions::default()
    };
    for variant in [Variant::Fism, Variant::MultimodalIris] {
        let a = train(&split, Some(&store), &hp, variant, &options).unwrap();
        let b = train(&split, Some(&store), &hp, variant, &options).unwrap();
        assert_eq!(a, b);
        let other = iris::model::Hyperparams {
            seed: hp.seed + 1,
            ..hp.clone()
        };
        let c = train(&split, Some(&store), &other, variant, &options).unwrap();
        assert_ne!(a.0, c.0);
    }
}

#[test]
fn planted_corpus_loss_falls_for_five_epochs() {
    let corpus = iris::synthetic::generate(&iris::synthetic::SyntheticSpec::default()).unwrap();
    let split = iris::dataset::leave_one_out_split(&corpus.data, 1).unwrap();
    let hp = iris::model::Hyperparams {
        seed: 1,
        ..Default::default()
    };
    let options = TrainOptions {
        max_epochs: 5,
        patience: 0,
        ..TrainOptions::default()
    };
    let (_, report) = train(&split, Some(&corpus.store), &hp, Variant::MultimodalIris, &options).unwrap();
    let losses: Vec<f64> = report.epochs.iter().map(|e| e.loss).collect();
    assert_eq!(losses.len(), 5);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn zero_filled_text_trains_end_to_end() {
    let (split, store) = trainable_corpus(3);
    let store = zero_fill_modality(store, Modality::Textual);
    let hp = small_hp();
    let options = TrainOptions {
        max_epochs: 2,
        patience: 0,
        ..TrainOptions::default()
    };
    let (params, report) = train(&split, Some(&store), &hp, Variant::MultimodalIris, &options).unwrap();
    assert!(params.first_non_finite().is_none());
    assert!(report.epochs.iter().all(|e| e.loss.is_finite()));
}

#[test]
fn training_report_csv() {
    let (split, store) = trainable_corpus(3);
    let options = TrainOptions {
        max_epochs: 2,
        patience: 0,
        ..TrainOptions::default()
    };
    let (_, report) = train(&split, Some(&store), &small_hp(), Variant::Fism, &options).unwrap();
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,loss,val_hr10,val_ndcg10");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,"));
}
