//! Forward and analytic backward pass of the training objective over a
//! mini-batch.

use rayon::prelude::*;

use crate::dataset::{ItemId, SplitBundle, UserId};
use crate::error::{Error, Result};
use crate::features::{FeatureStore, FeatureTrace, ItemFeatureEmbeddings};
use crate::linalg::Matrix;
use crate::model::{
    backward_trace, forward_trace, regularization_group, FeatureGrads, Hyperparams, ModelParams, ScoreTrace,
};

use super::loss::{bpr_term, log_loss_term, regularization_term, Batch, LossBreakdown, LossKind};

/// One gradient tensor per parameter tensor, same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub ModelParams);

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradientSet(params.zeros_like())
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.0.tensors().into_iter().find(|t| t.name == name).map(|t| t.data)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.0.tensor_mut(name)
    }
}

/// Feature-network activations for the items a batch touches, laid out by
/// item id (untouched rows stay zero and have no trace).
struct FeatureTape {
    traces: Vec<Option<FeatureTrace>>,
    embeddings: ItemFeatureEmbeddings,
}

fn feature_tape(
    params: &ModelParams,
    hp: &Hyperparams,
    store: Option<&FeatureStore>,
    touched: &[ItemId],
) -> Result<Option<FeatureTape>> {
    let Some(fnet) = &params.feature_net else {
        return Ok(None);
    };
    let store = store.ok_or_else(|| Error::Precondition(format!("{} needs a feature store", params.variant)))?;
    crate::features::check_shapes(store, fnet)?;
    let act = hp.feature_activation;
    let computed: Vec<FeatureTrace> = touched
        .par_iter()
        .map(|&i| fnet.forward_item(store.visual(i), store.textual(i), act))
        .collect();
    let n = store.num_items();
    let k = fnet.output_dim();
    let mut visual = Matrix::zeros(n, k);
    let mut textual = fnet.textual.as_ref().map(|_| Matrix::zeros(n, k));
    let mut traces: Vec<Option<FeatureTrace>> = vec![None; n];
    for (trace, &item) in computed.into_iter().zip(touched) {
        if trace
            .visual
            .iter()
            .chain(trace.textual.iter().flatten())
            .any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite(format!("feature embedding of item {item}")));
        }
        visual.row_mut(item).copy_from_slice(&trace.visual);
        if let (Some(dst), Some(src)) = (textual.as_mut(), &trace.textual) {
            dst.row_mut(item).copy_from_slice(src);
        }
        traces[item] = Some(trace);
    }
    Ok(Some(FeatureTape {
        traces,
        embeddings: ItemFeatureEmbeddings { visual, textual },
    }))
}

/// Scored pairs in batch order; for pairwise batches positive and negative
/// alternate.
fn batch_pairs(batch: Batch<'_>) -> Vec<(UserId, ItemId)> {
    match batch {
        Batch::Pointwise(b) => b.iter().map(|x| (x.user, x.item)).collect(),
        Batch::Pairwise(b) => b
            .iter()
            .flat_map(|t| [(t.user, t.positive), (t.user, t.negative)])
            .collect(),
    }
}

fn touched_items(split: &SplitBundle, pairs: &[(UserId, ItemId)]) -> Result<Vec<ItemId>> {
    let n = split.num_items();
    let mut mark = vec![false; n];
    for &(user, item) in pairs {
        if item >= n {
            return Err(Error::UnknownItem(item.to_string()));
        }
        mark[item] = true;
        for &i in split.train.try_positives(user)? {
            mark[i] = true;
        }
    }
    Ok((0..n).filter(|&i| mark[i]).collect())
}

/// Result of a forward pass over one batch.
#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    pub loss: LossBreakdown,
    /// `r̂` per instance (pointwise) or `r̂_ui − r̂_ux` per triple.
    pub scores: Vec<f64>,
    /// Data loss of each instance or triple; sums to `loss.data`.
    pub terms: Vec<f64>,
}

/// Loss kind plus the factor applied to the regularisation term (the
/// training loop uses `batch / total` so each epoch applies it once).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub loss: LossKind,
    pub reg_scale: f64,
}

struct Forward {
    tape: Option<FeatureTape>,
    touched: Vec<ItemId>,
    traces: Vec<ScoreTrace>,
    loss: LossBreakdown,
    scores: Vec<f64>,
    terms: Vec<f64>,
    /// d loss / d score per trace.
    score_grads: Vec<f64>,
}

impl Objective {
    pub fn new(loss: LossKind) -> Self {
        Objective { loss, reg_scale: 1.0 }
    }

    fn forward(
        &self,
        batch: Batch<'_>,
        params: &ModelParams,
        hp: &Hyperparams,
        split: &SplitBundle,
        store: Option<&FeatureStore>,
    ) -> Result<Forward> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        match (self.loss.is_pairwise(), batch) {
            (true, Batch::Pointwise(_)) => {
                return Err(Error::Precondition(
                    "bpr needs (user, positive, negative) triples".into(),
                ))
            }
            (false, Batch::Pairwise(_)) => {
                return Err(Error::Precondition(format!("{} needs labelled instances", self.loss)))
            }
            _ => {}
        }
        let pairs = batch_pairs(batch);
        let touched = touched_items(split, &pairs)?;
        let tape = feature_tape(params, hp, store, &touched)?;
        let feats = tape.as_ref().map(|t| &t.embeddings);
        let traces: Vec<ScoreTrace> = pairs
            .par_iter()
            .map(|&(u, i)| forward_trace(params, hp, &split.train, feats, u, i))
            .collect::<Result<_>>()?;

        let mut terms = Vec::with_capacity(batch.len());
        let mut scores = Vec::with_capacity(batch.len());
        let mut score_grads = Vec::with_capacity(traces.len());
        match batch {
            Batch::Pointwise(instances) => {
                for (x, t) in instances.iter().zip(&traces) {
                    let (value, g) = match self.loss {
                        LossKind::Mse => {
                            let err = t.score - f64::from(x.label);
                            (0.5 * err * err, err)
                        }
                        _ => log_loss_term(t.score, x.label),
                    };
                    terms.push(value);
                    scores.push(t.score);
                    score_grads.push(g);
                }
            }
            Batch::Pairwise(_) => {
                for pair in traces.chunks(2) {
                    let diff = pair[0].item_part - pair[1].item_part;
                    let (value, g) = bpr_term(diff);
                    terms.push(value);
                    scores.push(diff);
                    score_grads.extend([g, -g]);
                }
            }
        }
        let data = terms.iter().sum();
        let regularization = self.reg_scale * regularization_term(params, hp);
        Ok(Forward {
            tape,
            touched,
            traces,
            loss: LossBreakdown { data, regularization },
            scores,
            terms,
            score_grads,
        })
    }

    pub fn evaluate(
        &self,
        batch: Batch<'_>,
        params: &ModelParams,
        hp: &Hyperparams,
        split: &SplitBundle,
        store: Option<&FeatureStore>,
    ) -> Result<BatchEvaluation> {
        let f = self.forward(batch, params, hp, split, store)?;
        Ok(BatchEvaluation {
            loss: f.loss,
            scores: f.scores,
            terms: f.terms,
        })
    }

    /// Loss and exact gradient of the objective with respect to every
    /// parameter tensor.
    pub fn gradient(
        &self,
        batch: Batch<'_>,
        params: &ModelParams,
        hp: &Hyperparams,
        split: &SplitBundle,
        store: Option<&FeatureStore>,
    ) -> Result<(BatchEvaluation, GradientSet)> {
        let f = self.forward(batch, params, hp, split, store)?;
        let mut grads = GradientSet::zeros_like(params);
        let feats = f.tape.as_ref().map(|t| &t.embeddings);
        let mut feature_grads = feats.map(FeatureGrads::zeros);
        for (trace, &g) in f.traces.iter().zip(&f.score_grads) {
            backward_trace(trace, g, params, hp, feats, &mut grads.0, feature_grads.as_mut())?;
        }

        if let (Some(tape), Some(fg), Some(fnet), Some(store)) = (&f.tape, &feature_grads, &params.feature_net, store) {
            let g_fnet = grads.0.feature_net.as_mut().expect("gradient layout matches params");
            for &item in &f.touched {
                let dv = fg.visual.row(item);
                let dt = fg.textual.as_ref().map(|m| m.row(item));
                let idle = dv.iter().chain(dt.into_iter().flatten()).all(|&x| x == 0.0);
                if idle {
                    continue;
                }
                let trace = tape.traces[item].as_ref().expect("touched items have traces");
                fnet.backward_item(
                    trace,
                    store.visual(item),
                    store.textual(item),
                    dv,
                    dt,
                    hp.feature_activation,
                    g_fnet,
                );
            }
        }

        let theta = params.tensors();
        for ((name, g), t) in grads.0.tensors_mut().into_iter().zip(&theta) {
            if let Some(group) = regularization_group(name) {
                let lambda = hp.lambdas[group];
                if lambda != 0.0 {
                    let c = 2.0 * lambda * self.reg_scale;
                    g.iter_mut().zip(t.data).for_each(|(g, &x)| *g += c * x);
                }
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        Ok((
            BatchEvaluation {
                loss: f.loss,
                scores: f.scores,
                terms: f.terms,
            },
            grads,
        ))
    }
}

/// Gradient of `loss` (with full regularisation) over `batch`.
pub fn backward(
    batch: Batch<'_>,
    loss: LossKind,
    params: &ModelParams,
    hp: &Hyperparams,
    split: &SplitBundle,
    store: Option<&FeatureStore>,
) -> Result<GradientSet> {
    Objective::new(loss)
        .gradient(batch, params, hp, split, store)
        .map(|(_, g)| g)
}
