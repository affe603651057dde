use crate::dataset::ItemId;
use crate::error::{Error, Result};
use crate::features::ItemFeatureEmbeddings;
use crate::linalg::{Activation, Matrix};

use super::{IrnParams, ModelParams};

/// `w_i = exp(z_i) / (Σ_j exp(z_j))^beta`.
///
/// Evaluated as `exp(z_i - m) / S'^beta * exp(m (1 - beta))` with `m` the
/// largest logit and `S'` the shifted sum, which is the same quantity.
pub fn smoothed_softmax(logits: &[f64], beta: f64) -> Result<Vec<f64>> {
    smoothed_softmax_parts(logits, beta).map(|(w, _)| w)
}

/// Returns the smoothed weights together with the ordinary softmax
/// probabilities `exp(z_i) / S`, which the gradient needs.
pub(crate) fn smoothed_softmax_parts(logits: &[f64], beta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if logits.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("attention logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = shifted.iter().sum();
    let scale = (max * (1.0 - beta)).exp() / sum.powf(beta);
    if !scale.is_finite() || scale == 0.0 {
        return Err(Error::NonFinite(format!(
            "smoothed softmax scale (max logit {max}, beta {beta})"
        )));
    }
    let weights = shifted.iter().map(|e| e * scale).collect();
    let probs = shifted.iter().map(|e| e / sum).collect();
    Ok((weights, probs))
}

/// Row sources feeding the attention network.
pub(crate) struct AttentionInputs<'a> {
    pub history: &'a Matrix,
    pub target: &'a Matrix,
    pub text: Option<&'a Matrix>,
}

pub(crate) fn attention_inputs<'a>(
    params: &'a ModelParams,
    features: Option<&'a ItemFeatureEmbeddings>,
) -> Result<AttentionInputs<'a>> {
    let variant = params.variant;
    if !variant.has_attention() {
        return Err(Error::UnsupportedVariant {
            variant: variant.to_string(),
            operation: "attention",
        });
    }
    if !variant.uses_visual() {
        return Ok(AttentionInputs {
            history: &params.history_embeddings,
            target: &params.target_embeddings,
            text: None,
        });
    }
    let feats = features.ok_or_else(|| Error::Precondition(format!("{variant} needs item feature embeddings")))?;
    let text = if variant.uses_textual() {
        Some(
            feats
                .textual
                .as_ref()
                .ok_or_else(|| Error::Precondition(format!("{variant} needs textual embeddings")))?,
        )
    } else {
        None
    };
    Ok(AttentionInputs {
        history: &feats.visual,
        target: &feats.visual,
        text,
    })
}

/// Target-dependent part of the hidden pre-activation: `W2 x_j + W4 t_j + b`.
pub(crate) fn target_preactivation(irn: &IrnParams, inputs: &AttentionInputs<'_>, target: ItemId) -> Vec<f64> {
    let mut pre = irn.b.clone();
    irn.w2.gemv_acc(inputs.target.row(target), &mut pre);
    if let (Some(w4), Some(text)) = (&irn.w4, inputs.text) {
        w4.gemv_acc(text.row(target), &mut pre);
    }
    pre
}

/// Full pre-activation for one history item given the target part.
pub(crate) fn history_preactivation(
    irn: &IrnParams,
    inputs: &AttentionInputs<'_>,
    item: ItemId,
    target_pre: &[f64],
) -> Vec<f64> {
    let mut pre = target_pre.to_vec();
    irn.w1.gemv_acc(inputs.history.row(item), &mut pre);
    if let (Some(w3), Some(text)) = (&irn.w3, inputs.text) {
        w3.gemv_acc(text.row(item), &mut pre);
    }
    pre
}

pub(crate) fn logit_from_preactivation(irn: &IrnParams, pre: &[f64], act: Activation) -> f64 {
    irn.h.iter().zip(pre).map(|(h, &u)| h * act.apply(u)).sum()
}

/// One attention logit per history item: `hᵀ f(W1 x_i + W2 x_j [+ W3 t_i +
/// W4 t_j] + b)`. `features` rows are indexed by item id and are required
/// for the feature-based variants.
pub fn attention_logits(
    history: &[ItemId],
    target: ItemId,
    params: &ModelParams,
    features: Option<&ItemFeatureEmbeddings>,
    act: Activation,
) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(Error::Precondition("attention needs a non-empty history".into()));
    }
    let inputs = attention_inputs(params, features)?;
    let irn = params.irn.as_ref().expect("attention variants carry IRN parameters");
    let target_pre = target_preactivation(irn, &inputs, target);
    Ok(history
        .iter()
        .map(|&i| logit_from_preactivation(irn, &history_preactivation(irn, &inputs, i, &target_pre), act))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelShape, Variant};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn beta_one_is_plain_softmax() {
        let w = smoothed_softmax(&[0.3, -1.2, 2.0, 0.0], 1.0).unwrap();
        assert!(close(w.iter().sum::<f64>(), 1.0, 1e-15));
    }

    #[test]
    fn two_zero_logits_at_beta_point_eight() {
        let w = smoothed_softmax(&[0.0, 0.0], 0.8).unwrap();
        let expected = 2f64.powf(-0.8);
        assert!(close(w[0], 0.574349, 1e-6), "{}", w[0]);
        assert!(close(w[0], expected, 1e-15));
        assert!(close(w.iter().sum::<f64>(), 1.148698, 1e-6));
    }

    #[test]
    fn single_logit_has_unit_weight() {
        for beta in [0.0, 0.3, 0.8, 1.0] {
            assert!(close(smoothed_softmax(&[0.0], beta).unwrap()[0], 1.0, 1e-15));
        }
    }

    #[test]
    fn large_logits_stay_finite_with_beta_one() {
        let w = smoothed_softmax(&[1000.0, 999.0], 1.0).unwrap();
        assert!(close(w.iter().sum::<f64>(), 1.0, 1e-12));
    }

    #[test]
    fn overflow_is_reported() {
        assert!(matches!(
            smoothed_softmax(&[1000.0, 0.0], 0.0),
            Err(Error::NonFinite(_))
        ));
    }

    fn nais_params() -> ModelParams {
        ModelParams::zeros(ModelShape {
            variant: Variant::Nais,
            num_users: 1,
            num_items: 2,
            embedding_dim: 1,
            attention_dim: 1,
            visual_dim: 0,
            hidden_dim: 0,
        })
    }

    #[test]
    fn hand_evaluated_logit() {
        let mut p = nais_params();
        p.history_embeddings[(0, 0)] = 2.0;
        p.target_embeddings[(1, 0)] = 3.0;
        let irn = p.irn.as_mut().unwrap();
        irn.w1[(0, 0)] = 1.0;
        irn.w2[(0, 0)] = 1.0;
        irn.h[0] = 1.0;
        let z = attention_logits(&[0], 1, &p, None, Activation::Identity).unwrap();
        assert_eq!(z, vec![5.0]);
    }

    #[test]
    fn zero_output_layer_gives_zero_logits() {
        let mut p = nais_params();
        p.history_embeddings[(0, 0)] = 7.0;
        let irn = p.irn.as_mut().unwrap();
        irn.w1[(0, 0)] = 3.0;
        irn.b[0] = 1.0;
        let z = attention_logits(&[0, 1], 1, &p, None, Activation::Relu).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_inputs_leave_only_the_bias() {
        let mut p = nais_params();
        let irn = p.irn.as_mut().unwrap();
        irn.w1[(0, 0)] = 4.0;
        irn.b[0] = 0.7;
        irn.h[0] = -2.0;
        let z = attention_logits(&[0], 1, &p, None, Activation::Softplus).unwrap();
        assert!(close(z[0], -2.0 * Activation::Softplus.apply(0.7), 1e-15));
    }

    #[test]
    fn empty_history_is_rejected() {
        let p = nais_params();
        assert!(matches!(
            attention_logits(&[], 1, &p, None, Activation::Relu),
            Err(Error::Precondition(_))
        ));
    }
}
