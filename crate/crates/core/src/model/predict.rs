//! Scoring of (user, target) pairs and the analytic backward pass through
//! a single score.

use crate::dataset::{InteractionDataset, ItemId, SplitBundle, UserId};
use crate::error::{Error, Result};
use crate::features::{FeatureStore, ItemFeatureEmbeddings};
use crate::linalg::{axpy, dot, Matrix};

use super::attention::{
    attention_inputs, history_preactivation, logit_from_preactivation, smoothed_softmax_parts, target_preactivation,
};
use super::{Hyperparams, ModelParams, Variant};

#[derive(Debug, Clone)]
struct AttentionTrace {
    /// Hidden pre-activation per history item.
    pre: Vec<Vec<f64>>,
    logits: Vec<f64>,
    weights: Vec<f64>,
    probs: Vec<f64>,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub(crate) struct ScoreTrace {
    pub user: UserId,
    pub target: ItemId,
    pub history: Vec<ItemId>,
    /// Leading normaliser (`1/|H|` or `|H|^-alpha`).
    norm: f64,
    /// `p_i · q_j` per history item.
    dots: Vec<f64>,
    attention: Option<AttentionTrace>,
    /// Score without the user bias. Pairwise losses difference this part so
    /// that the user bias cancels exactly.
    pub item_part: f64,
    pub score: f64,
}

fn check_ids(params: &ModelParams, train: &InteractionDataset, user: UserId, target: ItemId) -> Result<()> {
    if user >= train.num_users() {
        return Err(Error::UnknownUser(user.to_string()));
    }
    if target >= params.num_items() || target >= train.num_items() {
        return Err(Error::UnknownItem(target.to_string()));
    }
    Ok(())
}

pub(crate) fn forward_trace(
    params: &ModelParams,
    hp: &Hyperparams,
    train: &InteractionDataset,
    features: Option<&ItemFeatureEmbeddings>,
    user: UserId,
    target: ItemId,
) -> Result<ScoreTrace> {
    check_ids(params, train, user, target)?;
    let history: Vec<ItemId> = train.positives(user).iter().copied().filter(|&i| i != target).collect();
    let (user_bias, item_bias) = match (params.variant, &params.biases) {
        (Variant::BiasBaseline, Some(b)) => (b.user[user], b.item[target]),
        (Variant::BiasBaseline, None) => {
            return Err(Error::Precondition("bias baseline without bias table".into()));
        }
        _ => (0.0, 0.0),
    };
    let mut trace = ScoreTrace {
        user,
        target,
        history,
        norm: 0.0,
        dots: Vec::new(),
        attention: None,
        item_part: item_bias,
        score: 0.0,
    };
    if trace.history.is_empty() {
        trace.score = item_bias + user_bias;
        return Ok(trace);
    }

    let q = params.target_embeddings.row(target);
    trace.dots = trace
        .history
        .iter()
        .map(|&i| dot(params.history_embeddings.row(i), q))
        .collect();
    let len = trace.history.len() as f64;

    match params.variant {
        Variant::BiasBaseline => {
            trace.norm = 1.0 / len;
            trace.item_part += trace.norm * trace.dots.iter().sum::<f64>();
        }
        Variant::Fism => {
            trace.norm = len.powf(-hp.alpha_norm);
            trace.item_part = trace.norm * trace.dots.iter().sum::<f64>();
        }
        _ => {
            let inputs = attention_inputs(params, features)?;
            let irn = params.irn.as_ref().expect("attention variants carry IRN parameters");
            let act = hp.attention_activation;
            let target_pre = target_preactivation(irn, &inputs, target);
            let pre: Vec<Vec<f64>> = trace
                .history
                .iter()
                .map(|&i| history_preactivation(irn, &inputs, i, &target_pre))
                .collect();
            let logits: Vec<f64> = pre.iter().map(|u| logit_from_preactivation(irn, u, act)).collect();
            let (weights, probs) = smoothed_softmax_parts(&logits, hp.beta)?;
            trace.norm = len.powf(-hp.alpha_norm);
            trace.item_part = trace.norm * dot(&weights, &trace.dots);
            trace.attention = Some(AttentionTrace {
                pre,
                logits,
                weights,
                probs,
            });
        }
    }
    trace.score = trace.item_part + user_bias;
    if !trace.score.is_finite() {
        return Err(Error::NonFinite(format!("score of user {user} for item {target}")));
    }
    Ok(trace)
}

/// Gradients with respect to the transformed item features, indexed by
/// item id.
#[derive(Debug, Clone)]
pub(crate) struct FeatureGrads {
    pub visual: Matrix,
    pub textual: Option<Matrix>,
}

impl FeatureGrads {
    pub fn zeros(features: &ItemFeatureEmbeddings) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        FeatureGrads {
            visual: z(&features.visual),
            textual: features.textual.as_ref().map(z),
        }
    }
}

/// Accumulates `grad * ∂score/∂θ` into `grads` (and into `feature_grads`
/// for the transformed features).
pub(crate) fn backward_trace(
    trace: &ScoreTrace,
    grad: f64,
    params: &ModelParams,
    hp: &Hyperparams,
    features: Option<&ItemFeatureEmbeddings>,
    grads: &mut ModelParams,
    mut feature_grads: Option<&mut FeatureGrads>,
) -> Result<()> {
    if grad == 0.0 {
        return Ok(());
    }
    if let (Some(b), Variant::BiasBaseline) = (grads.biases.as_mut(), params.variant) {
        b.user[trace.user] += grad;
        b.item[trace.target] += grad;
    }
    if trace.history.is_empty() {
        return Ok(());
    }
    let target = trace.target;
    let q = params.target_embeddings.row(target);

    let Some(att) = &trace.attention else {
        // Unweighted sum: every history item has coefficient `norm`.
        let coef = grad * trace.norm;
        let mut p_sum = vec![0.0; q.len()];
        for &i in &trace.history {
            axpy(coef, q, grads.history_embeddings.row_mut(i));
            axpy(1.0, params.history_embeddings.row(i), &mut p_sum);
        }
        axpy(coef, &p_sum, grads.target_embeddings.row_mut(target));
        return Ok(());
    };

    let coef = grad * trace.norm;
    let mut weighted_p = vec![0.0; q.len()];
    for (&i, &w) in trace.history.iter().zip(&att.weights) {
        axpy(coef * w, q, grads.history_embeddings.row_mut(i));
        axpy(w, params.history_embeddings.row(i), &mut weighted_p);
    }
    axpy(coef, &weighted_p, grads.target_embeddings.row_mut(target));

    // d score / d z_k = norm * (s_k w_k - beta * pi_k * Σ_i w_i s_i)
    let weighted_sum = dot(&att.weights, &trace.dots);
    let irn = params.irn.as_ref().expect("attention variants carry IRN parameters");
    let g_irn = grads.irn.as_mut().expect("gradient layout matches params");
    let inputs = attention_inputs(params, features)?;
    let act = hp.attention_activation;
    let a = irn.hidden_dim();
    let mut delta = vec![0.0; a];
    let mut d_target_main = vec![0.0; inputs.target.cols()];
    let mut d_target_text = inputs.text.map(|t| vec![0.0; t.cols()]);
    let nais = !params.variant.uses_visual();

    for (idx, &i) in trace.history.iter().enumerate() {
        let g_logit = coef * (trace.dots[idx] * att.weights[idx] - hp.beta * att.probs[idx] * weighted_sum);
        if g_logit == 0.0 {
            continue;
        }
        let pre = &att.pre[idx];
        for r in 0..a {
            g_irn.h[r] += g_logit * act.apply(pre[r]);
            delta[r] = g_logit * irn.h[r] * act.derivative(pre[r]);
        }
        axpy(1.0, &delta, &mut g_irn.b);
        let x_i = inputs.history.row(i);
        let x_j = inputs.target.row(target);
        g_irn.w1.add_outer(1.0, &delta, x_i);
        g_irn.w2.add_outer(1.0, &delta, x_j);
        irn.w2.gemv_t_acc(&delta, &mut d_target_main);

        let mut d_hist = vec![0.0; x_i.len()];
        irn.w1.gemv_t_acc(&delta, &mut d_hist);
        if nais {
            axpy(1.0, &d_hist, grads.history_embeddings.row_mut(i));
        } else {
            let fg = feature_grads
                .as_deref_mut()
                .ok_or_else(|| Error::Precondition("feature gradients required for feature-based variants".into()))?;
            axpy(1.0, &d_hist, fg.visual.row_mut(i));
        }

        if let (Some(text), Some(w3), Some(w4)) = (inputs.text, &irn.w3, &irn.w4) {
            let g3 = g_irn.w3.as_mut().expect("gradient layout matches params");
            g3.add_outer(1.0, &delta, text.row(i));
            let g4 = g_irn.w4.as_mut().expect("gradient layout matches params");
            g4.add_outer(1.0, &delta, text.row(target));
            if let Some(dt) = d_target_text.as_mut() {
                w4.gemv_t_acc(&delta, dt);
            }
            let fg = feature_grads
                .as_deref_mut()
                .ok_or_else(|| Error::Precondition("feature gradients required for feature-based variants".into()))?;
            let ft = fg
                .textual
                .as_mut()
                .ok_or_else(|| Error::Precondition("textual feature gradients missing".into()))?;
            w3.gemv_t_acc(&delta, ft.row_mut(i));
        }
    }

    if nais {
        axpy(1.0, &d_target_main, grads.target_embeddings.row_mut(target));
    } else if let Some(fg) = feature_grads {
        axpy(1.0, &d_target_main, fg.visual.row_mut(target));
        if let (Some(dt), Some(ft)) = (d_target_text, fg.textual.as_mut()) {
            axpy(1.0, &dt, ft.row_mut(target));
        }
    }
    Ok(())
}

/// Interest relevance of each history item for one target.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub target: ItemId,
    pub history: Vec<ItemId>,
    pub weights: Vec<f64>,
    pub logits: Vec<f64>,
}

impl AttentionWeights {
    /// Sorts by weight descending (ties: ascending item id) and keeps the
    /// first `top_m` entries.
    pub fn top(mut self, top_m: usize) -> Self {
        let mut order: Vec<usize> = (0..self.history.len()).collect();
        order.sort_by(|&a, &b| {
            self.weights[b]
                .total_cmp(&self.weights[a])
                .then(self.history[a].cmp(&self.history[b]))
        });
        order.truncate(top_m);
        self.history = order.iter().map(|&k| self.history[k]).collect();
        self.weights = order.iter().map(|&k| self.weights[k]).collect();
        self.logits = order.iter().map(|&k| self.logits[k]).collect();
        self
    }
}

/// Scores pairs with frozen parameters; transformed item features are
/// computed once at construction.
pub struct Predictor<'a> {
    params: &'a ModelParams,
    hp: &'a Hyperparams,
    train: &'a InteractionDataset,
    features: Option<ItemFeatureEmbeddings>,
}

impl<'a> Predictor<'a> {
    pub fn new(
        params: &'a ModelParams,
        hp: &'a Hyperparams,
        split: &'a SplitBundle,
        store: Option<&FeatureStore>,
    ) -> Result<Self> {
        let features = match (&params.feature_net, store) {
            (Some(fnet), Some(store)) => Some(ItemFeatureEmbeddings::for_all_items(
                store,
                fnet,
                hp.feature_activation,
            )?),
            (Some(_), None) => return Err(Error::Precondition(format!("{} needs a feature store", params.variant))),
            (None, _) => None,
        };
        Ok(Predictor {
            params,
            hp,
            train: &split.train,
            features,
        })
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    pub fn score(&self, user: UserId, target: ItemId) -> Result<f64> {
        forward_trace(self.params, self.hp, self.train, self.features.as_ref(), user, target).map(|t| t.score)
    }

    /// `σ(score)`.
    pub fn probability(&self, user: UserId, target: ItemId) -> Result<f64> {
        self.score(user, target).map(crate::linalg::logistic)
    }

    /// Attention weights over the user's history (target excluded), in
    /// history order.
    pub fn attention(&self, user: UserId, target: ItemId) -> Result<AttentionWeights> {
        if !self.params.variant.has_attention() {
            return Err(Error::UnsupportedVariant {
                variant: self.params.variant.to_string(),
                operation: "interest relevance (variant has no attention)",
            });
        }
        let trace = forward_trace(self.params, self.hp, self.train, self.features.as_ref(), user, target)?;
        let att = trace
            .attention
            .ok_or_else(|| Error::Precondition(format!("user {user} has no history besides item {target}")))?;
        Ok(AttentionWeights {
            target,
            history: trace.history,
            weights: att.weights,
            logits: att.logits,
        })
    }
}

/// Feature embeddings for the listed items only, laid out by item id.
fn partial_features(
    params: &ModelParams,
    hp: &Hyperparams,
    store: Option<&FeatureStore>,
    items: &[ItemId],
) -> Result<Option<ItemFeatureEmbeddings>> {
    let Some(fnet) = &params.feature_net else {
        return Ok(None);
    };
    let store = store.ok_or_else(|| Error::Precondition(format!("{} needs a feature store", params.variant)))?;
    let rows = crate::features::feature_network_forward(store, fnet, items, hp.feature_activation)?;
    let n = store.num_items();
    let mut visual = Matrix::zeros(n, rows.visual.cols());
    let mut textual = rows.textual.as_ref().map(|t| Matrix::zeros(n, t.cols()));
    for (r, &item) in items.iter().enumerate() {
        visual.row_mut(item).copy_from_slice(rows.visual.row(r));
        if let (Some(dst), Some(src)) = (textual.as_mut(), rows.textual.as_ref()) {
            dst.row_mut(item).copy_from_slice(src.row(r));
        }
    }
    Ok(Some(ItemFeatureEmbeddings { visual, textual }))
}

fn needed_items(split: &SplitBundle, user: UserId, target: ItemId) -> Result<Vec<ItemId>> {
    let mut items = split.train.try_positives(user)?.to_vec();
    items.push(target);
    Ok(items)
}

/// Attention-weighted item similarity score for the attention variants.
pub fn iris_predict(
    user: UserId,
    target: ItemId,
    params: &ModelParams,
    hp: &Hyperparams,
    split: &SplitBundle,
    store: Option<&FeatureStore>,
) -> Result<f64> {
    if !params.variant.has_attention() {
        return Err(Error::UnsupportedVariant {
            variant: params.variant.to_string(),
            operation: "attention-weighted prediction",
        });
    }
    check_ids(params, &split.train, user, target)?;
    let feats = partial_features(params, hp, store, &needed_items(split, user, target)?)?;
    forward_trace(params, hp, &split.train, feats.as_ref(), user, target).map(|t| t.score)
}

/// `|H|^-alpha (Σ_{i∈H} p_i) · q_j` using the latent factors of `params`,
/// whatever its variant.
pub fn fism_predict(
    user: UserId,
    target: ItemId,
    params: &ModelParams,
    hp: &Hyperparams,
    split: &SplitBundle,
) -> Result<f64> {
    check_ids(params, &split.train, user, target)?;
    let fism = ModelParams {
        variant: Variant::Fism,
        history_embeddings: params.history_embeddings.clone(),
        target_embeddings: params.target_embeddings.clone(),
        irn: None,
        feature_net: None,
        biases: None,
    };
    forward_trace(&fism, hp, &split.train, None, user, target).map(|t| t.score)
}

/// Mean history similarity plus user and item bias.
pub fn baseline_itemsim_predict(
    user: UserId,
    target: ItemId,
    params: &ModelParams,
    hp: &Hyperparams,
    split: &SplitBundle,
) -> Result<f64> {
    if params.variant != Variant::BiasBaseline {
        return Err(Error::UnsupportedVariant {
            variant: params.variant.to_string(),
            operation: "bias baseline prediction",
        });
    }
    forward_trace(params, hp, &split.train, None, user, target).map(|t| t.score)
}

/// History items ranked by attention weight for one target, truncated to
/// `top_m`.
pub fn interest_relevance(
    user: UserId,
    target: ItemId,
    params: &ModelParams,
    hp: &Hyperparams,
    split: &SplitBundle,
    store: Option<&FeatureStore>,
    top_m: usize,
) -> Result<AttentionWeights> {
    if !params.variant.has_attention() {
        return Err(Error::UnsupportedVariant {
            variant: params.variant.to_string(),
            operation: "interest relevance (variant has no attention)",
        });
    }
    check_ids(params, &split.train, user, target)?;
    let feats = partial_features(params, hp, store, &needed_items(split, user, target)?)?;
    let trace = forward_trace(params, hp, &split.train, feats.as_ref(), user, target)?;
    let att = trace
        .attention
        .ok_or_else(|| Error::Precondition(format!("user {user} has no history besides item {target}")))?;
    Ok(AttentionWeights {
        target,
        history: trace.history,
        weights: att.weights,
        logits: att.logits,
    }
    .top(top_m))
}
