use std::fmt;
use std::str::FromStr;

use crate::dataset::{SplitBundle, TrainInstance, Triple};
use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::linalg::{logistic, Activation};
use crate::model::{regularization_group, Hyperparams, ModelParams};

use super::backward::Objective;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    PointwiseLog,
    Mse,
    Bpr,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::PointwiseLog => "pointwise_log",
            LossKind::Mse => "mse",
            LossKind::Bpr => "bpr",
        }
    }

    pub fn is_pairwise(self) -> bool {
        self == LossKind::Bpr
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "pointwise_log" | "log" | "cross_entropy" => Ok(LossKind::PointwiseLog),
            "mse" => Ok(LossKind::Mse),
            "bpr" => Ok(LossKind::Bpr),
            other => Err(format!("unknown loss '{other}'")),
        }
    }
}

/// A mini-batch in either the pointwise or the pairwise shape.
#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    Pointwise(&'a [TrainInstance]),
    Pairwise(&'a [Triple]),
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        match self {
            Batch::Pointwise(b) => b.len(),
            Batch::Pairwise(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub data: f64,
    pub regularization: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.data + self.regularization
    }
}

/// Negative log-likelihood of one label given a score, and its derivative
/// with respect to the score. The derivative is zero where the clamp is
/// active, which is what the clamped value actually does.
pub(crate) fn log_loss_term(score: f64, label: u8) -> (f64, f64) {
    let p = logistic(score);
    let clamped = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let y = f64::from(label);
    let value = -(y * clamped.ln() + (1.0 - y) * (1.0 - clamped).ln());
    let grad = if clamped != p { 0.0 } else { p - y };
    (value, grad)
}

/// `-ln σ(d)` and its derivative with respect to `d`.
pub(crate) fn bpr_term(diff: f64) -> (f64, f64) {
    (Activation::Softplus.apply(-diff), -logistic(-diff))
}

/// `λ1(‖P‖² + ‖Q‖²) + λ2 Σ‖W1..W4‖² + λ3 (‖stem‖² + ‖W_v2v‖² + ‖W_t2t‖²)
/// + λ4 ‖W_share‖²`, all squared Frobenius norms.
pub fn regularization_term(params: &ModelParams, hp: &Hyperparams) -> f64 {
    regularization_terms(params, hp).iter().sum()
}

/// Per-tensor contributions to [`regularization_term`], in tensor order.
pub(crate) fn regularization_terms(params: &ModelParams, hp: &Hyperparams) -> Vec<f64> {
    params
        .tensors()
        .iter()
        .filter_map(|t| {
            let lambda = hp.lambdas[regularization_group(t.name)?];
            (lambda != 0.0).then(|| lambda * t.data.iter().map(|x| x * x).sum::<f64>())
        })
        .collect()
}

/// Total pointwise log loss plus regularisation, with `σ(r̂)` per instance.
pub fn loss_pointwise_log(
    batch: &[TrainInstance],
    params: &ModelParams,
    hp: &Hyperparams,
    split: &SplitBundle,
    store: Option<&FeatureStore>,
) -> Result<(f64, Vec<f64>)> {
    let eval = Objective::new(LossKind::PointwiseLog).evaluate(Batch::Pointwise(batch), params, hp, split, store)?;
    Ok((eval.loss.total(), eval.scores.iter().map(|&r| logistic(r)).collect()))
}

/// `½ Σ (r − r̂)²` plus regularisation.
pub fn loss_mse(
    batch: &[TrainInstance],
    params: &ModelParams,
    hp: &Hyperparams,
    split: &SplitBundle,
    store: Option<&FeatureStore>,
) -> Result<f64> {
    Objective::new(LossKind::Mse)
        .evaluate(Batch::Pointwise(batch), params, hp, split, store)
        .map(|e| e.loss.total())
}

/// `Σ −ln σ(r̂_ui − r̂_ux)` plus regularisation.
pub fn loss_bpr(
    triples: &[Triple],
    params: &ModelParams,
    hp: &Hyperparams,
    split: &SplitBundle,
    store: Option<&FeatureStore>,
) -> Result<f64> {
    for t in triples {
        if !split.train.contains(t.user, t.positive) {
            return Err(Error::Precondition(format!(
                "item {} is not a train positive of user {}",
                t.positive, t.user
            )));
        }
        if split.full.contains(t.user, t.negative) {
            return Err(Error::Precondition(format!(
                "item {} is a positive of user {} and cannot be a negative",
                t.negative, t.user
            )));
        }
    }
    Objective::new(LossKind::Bpr)
        .evaluate(Batch::Pairwise(triples), params, hp, split, store)
        .map(|e| e.loss.total())
}
