//! Losses, analytic gradients, optimisers and the epoch loop.

mod backward;
mod gradcheck;
mod init;
mod loss;
mod optimizer;

use std::fmt::Write as _;
use std::path::PathBuf;

pub use backward::{backward, BatchEvaluation, GradientSet, Objective};
pub use gradcheck::{
    compare_gradients, finite_difference_check, probe_parameters, relative_error, CoordinateError, GradCheckOptions,
    GradCheckReport, TensorCheck,
};
pub use init::{initialize, xavier_bound, EMBEDDING_STD};
pub use loss::{loss_bpr, loss_mse, loss_pointwise_log, regularization_term, Batch, LossBreakdown, LossKind, PROB_EPS};
pub use optimizer::{optimizer_step, OptimizerKind, OptimizerState};

use crate::dataset::{build_eval_candidates, sample_train_negatives, sample_train_triples, HoldoutSet, SplitBundle};
use crate::error::{Error, Result};
use crate::evaluation::{hr_at_n, ndcg_at_n, rank_cases};
use crate::features::FeatureStore;
use crate::model::{write_checkpoint, Checkpoint, Hyperparams, ModelParams, ModelShape, Predictor, Variant};

/// Cut-off used for model selection on the validation split.
pub const VALIDATION_N: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub loss: LossKind,
    pub max_epochs: usize,
    /// Epochs without a strict validation HR@10 improvement before
    /// stopping; 0 disables early stopping.
    pub patience: usize,
    /// Written whenever validation improves.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            loss: LossKind::PointwiseLog,
            max_epochs: 50,
            patience: 5,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean objective per training instance.
    pub loss: f64,
    pub val_hr10: f64,
    pub val_ndcg10: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stop_reason: StopReason,
}

impl TrainReport {
    /// `epoch,loss,val_hr10,val_ndcg10`, one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_hr10,val_ndcg10\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", e.epoch, e.loss, e.val_hr10, e.val_ndcg10);
        }
        out
    }
}

/// Validation HR@10 and NDCG@10 of `params`.
fn validate(
    params: &ModelParams,
    hp: &Hyperparams,
    split: &SplitBundle,
    store: Option<&FeatureStore>,
    cases: &[crate::dataset::EvalCase],
) -> Result<(f64, f64)> {
    let predictor = Predictor::new(params, hp, split, store)?;
    let lists = rank_cases(cases, &predictor)?;
    Ok((hr_at_n(&lists, VALIDATION_N)?, ndcg_at_n(&lists, VALIDATION_N)?))
}

/// Trains `variant` from a seeded initialisation and returns the parameters
/// of the best validation epoch (the initial parameters when no epoch ran).
pub fn train(
    split: &SplitBundle,
    store: Option<&FeatureStore>,
    hp: &Hyperparams,
    variant: Variant,
    options: &TrainOptions,
) -> Result<(ModelParams, TrainReport)> {
    hp.validate().map_err(Error::Config)?;
    if variant.uses_visual() && store.is_none() {
        return Err(Error::Precondition(format!("{variant} needs item features")));
    }
    let store = if variant.uses_visual() { store } else { None };
    let shape = ModelShape::for_data(variant, hp, split.num_users(), split.num_items(), store);
    let mut params = init::initialize(shape, hp.seed);
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        stop_reason: StopReason::MaxEpochs,
    };
    if options.max_epochs == 0 {
        return Ok((params, report));
    }

    let val_cases = build_eval_candidates(split, HoldoutSet::Validation, hp.seed)?;
    let mut state = OptimizerState::new(hp.optimizer, hp.learning_rate, &params);
    let mut best = params.clone();
    let mut best_hr = f64::NEG_INFINITY;
    let mut stale = 0;

    for epoch in 1..=options.max_epochs {
        let (instances, triples);
        let (total, batches): (usize, Vec<Batch<'_>>) = if options.loss.is_pairwise() {
            triples = sample_train_triples(split, hp.neg_ratio, hp.seed, epoch as u64)?;
            (
                triples.len(),
                triples.chunks(hp.batch_size).map(Batch::Pairwise).collect(),
            )
        } else {
            instances = sample_train_negatives(split, hp.neg_ratio, hp.seed, epoch as u64)?;
            (
                instances.len(),
                instances.chunks(hp.batch_size).map(Batch::Pointwise).collect(),
            )
        };

        let mut epoch_loss = 0.0;
        for batch in batches {
            let objective = Objective {
                loss: options.loss,
                reg_scale: batch.len() as f64 / total as f64,
            };
            let (eval, grads) = objective.gradient(batch, &params, hp, split, store)?;
            let batch_loss = eval.loss.total();
            if !batch_loss.is_finite() {
                report.stop_reason = StopReason::Diverged;
                return Err(Error::Diverged {
                    epoch,
                    report: Box::new(report),
                });
            }
            epoch_loss += batch_loss;
            optimizer_step(&mut params, &grads, &mut state)?;
        }
        if let Some(name) = params.first_non_finite() {
            log::error!("parameter tensor {name} became non-finite in epoch {epoch}");
            report.stop_reason = StopReason::Diverged;
            return Err(Error::Diverged {
                epoch,
                report: Box::new(report),
            });
        }

        let (hr, ndcg) = validate(&params, hp, split, store, &val_cases)?;
        let record = EpochRecord {
            epoch,
            loss: epoch_loss / total as f64,
            val_hr10: hr,
            val_ndcg10: ndcg,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} val HR@10 {hr:.4} NDCG@10 {ndcg:.4}",
            record.loss
        );
        report.epochs.push(record);

        if hr > best_hr {
            best_hr = hr;
            best.clone_from(&params);
            report.best_epoch = Some(epoch);
            stale = 0;
            if let Some(path) = &options.checkpoint {
                write_checkpoint(
                    path,
                    &Checkpoint {
                        params: best.clone(),
                        hp: hp.clone(),
                        num_users: split.num_users(),
                        loss: options.loss.name().to_owned(),
                        meta: Default::default(),
                    },
                )?;
            }
        } else {
            stale += 1;
            if options.patience > 0 && stale >= options.patience {
                report.stop_reason = StopReason::EarlyStopped;
                break;
            }
        }
    }
    Ok((best, report))
}
