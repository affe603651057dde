//! Model variants, their parameters, and hyper-parameters.

mod attention;
mod checkpoint;
mod predict;

use std::fmt;
use std::str::FromStr;

pub use attention::{attention_logits, smoothed_softmax};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub(crate) use predict::{backward_trace, forward_trace, FeatureGrads, ScoreTrace};
pub use predict::{
    baseline_itemsim_predict, fism_predict, interest_relevance, iris_predict, AttentionWeights, Predictor,
};

use crate::features::{FeatureNetParams, TextualBranch};
use crate::linalg::{Activation, Matrix};
use crate::training::OptimizerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Mean history similarity plus user and item biases.
    BiasBaseline,
    Fism,
    /// Attention over the latent factors themselves.
    Nais,
    ImageIris,
    ImageAddTextIris,
    MultimodalIris,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::BiasBaseline,
        Variant::Fism,
        Variant::Nais,
        Variant::ImageIris,
        Variant::ImageAddTextIris,
        Variant::MultimodalIris,
    ];

    pub fn has_attention(self) -> bool {
        !matches!(self, Variant::BiasBaseline | Variant::Fism)
    }

    pub fn uses_visual(self) -> bool {
        matches!(
            self,
            Variant::ImageIris | Variant::ImageAddTextIris | Variant::MultimodalIris
        )
    }

    pub fn uses_textual(self) -> bool {
        matches!(self, Variant::ImageAddTextIris | Variant::MultimodalIris)
    }

    pub fn shares_knowledge(self) -> bool {
        self == Variant::MultimodalIris
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::BiasBaseline => "bias_baseline",
            Variant::Fism => "fism",
            Variant::Nais => "nais",
            Variant::ImageIris => "image_iris",
            Variant::ImageAddTextIris => "image_add_text_iris",
            Variant::MultimodalIris => "multimodal_iris",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| format!("unknown variant '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Exponent of the history-length normaliser `|R_u^+|^alpha`.
    pub alpha_norm: f64,
    /// Smoothing exponent on the softmax denominator.
    pub beta: f64,
    /// Sampled negatives per positive.
    pub neg_ratio: usize,
    pub embedding_dim: usize,
    pub attention_dim: usize,
    /// Width of the visual stem output; also the textual width used when
    /// no textual file is given.
    pub feature_hidden_dim: usize,
    /// Regularisation weights: embeddings, attention weights, feature
    /// branch weights, shared matrix.
    pub lambdas: [f64; 4],
    pub learning_rate: f64,
    pub batch_size: usize,
    pub top_n: Vec<usize>,
    pub seed: u64,
    pub attention_activation: Activation,
    pub feature_activation: Activation,
    pub optimizer: OptimizerKind,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            alpha_norm: 0.0,
            beta: 0.8,
            neg_ratio: 4,
            embedding_dim: 16,
            attention_dim: 16,
            feature_hidden_dim: 768,
            lambdas: [0.0; 4],
            learning_rate: 0.001,
            batch_size: 512,
            top_n: vec![10, 20],
            seed: 42,
            attention_activation: Activation::Relu,
            feature_activation: Activation::Relu,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl Hyperparams {
    /// Keys accepted by [`Hyperparams::set`], in serialisation order.
    pub const KEYS: [&'static str; 17] = [
        "alpha_norm",
        "beta",
        "neg_ratio",
        "embedding_dim",
        "attention_dim",
        "feature_hidden_dim",
        "lambda1",
        "lambda2",
        "lambda3",
        "lambda4",
        "learning_rate",
        "batch_size",
        "top_n",
        "seed",
        "attention_activation",
        "feature_activation",
        "optimizer",
    ];

    /// Same hyper-parameters with every nonlinearity switched to softplus.
    pub fn smooth(&self) -> Self {
        Hyperparams {
            attention_activation: Activation::Softplus,
            feature_activation: Activation::Softplus,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(0.0..=1.0).contains(&self.alpha_norm) {
            return Err(format!("alpha_norm must lie in [0, 1], got {}", self.alpha_norm));
        }
        if self.neg_ratio == 0 {
            return Err("neg_ratio must be at least 1".into());
        }
        if self.embedding_dim == 0 || self.attention_dim == 0 || self.feature_hidden_dim == 0 {
            return Err("dimensions must be positive".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if self.top_n.is_empty() || self.top_n.contains(&0) {
            return Err("top_n must list positive cut-offs".into());
        }
        if self.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err("lambdas must be finite and non-negative".into());
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err("learning_rate must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.trim().parse().map_err(|_| format!("invalid value '{v}' for {key}"))
        }
        match key {
            "alpha_norm" => self.alpha_norm = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "neg_ratio" => self.neg_ratio = num(key, value)?,
            "embedding_dim" => self.embedding_dim = num(key, value)?,
            "attention_dim" => self.attention_dim = num(key, value)?,
            "feature_hidden_dim" => self.feature_hidden_dim = num(key, value)?,
            "lambda1" => self.lambdas[0] = num(key, value)?,
            "lambda2" => self.lambdas[1] = num(key, value)?,
            "lambda3" => self.lambdas[2] = num(key, value)?,
            "lambda4" => self.lambdas[3] = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "top_n" => {
                self.top_n = value
                    .split(',')
                    .map(|v| num::<usize>(key, v))
                    .collect::<Result<_, _>>()?
            }
            "seed" => self.seed = num(key, value)?,
            "attention_activation" => self.attention_activation = value.parse()?,
            "feature_activation" => self.feature_activation = value.parse()?,
            "optimizer" => self.optimizer = value.parse()?,
            _ => return Err(format!("unknown hyper-parameter '{key}'")),
        }
        Ok(())
    }

    /// `(key, value)` pairs that [`Hyperparams::set`] reads back exactly.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let top_n = self.top_n.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("alpha_norm", format!("{:?}", self.alpha_norm)),
            ("beta", format!("{:?}", self.beta)),
            ("neg_ratio", self.neg_ratio.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("attention_dim", self.attention_dim.to_string()),
            ("feature_hidden_dim", self.feature_hidden_dim.to_string()),
            ("lambda1", format!("{:?}", self.lambdas[0])),
            ("lambda2", format!("{:?}", self.lambdas[1])),
            ("lambda3", format!("{:?}", self.lambdas[2])),
            ("lambda4", format!("{:?}", self.lambdas[3])),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("batch_size", self.batch_size.to_string()),
            ("top_n", top_n),
            ("seed", self.seed.to_string()),
            ("attention_activation", self.attention_activation.to_string()),
            ("feature_activation", self.feature_activation.to_string()),
            ("optimizer", self.optimizer.to_string()),
        ]
    }
}

/// Two-layer attention perceptron. `w3`/`w4` act on textual inputs and
/// exist only for the variants that feed text to the attention network.
#[derive(Debug, Clone, PartialEq)]
pub struct IrnParams {
    /// `a x k`, applied to the history item.
    pub w1: Matrix,
    /// `a x k`, applied to the target item.
    pub w2: Matrix,
    pub w3: Option<Matrix>,
    pub w4: Option<Matrix>,
    pub h: Vec<f64>,
    pub b: Vec<f64>,
}

impl IrnParams {
    pub fn hidden_dim(&self) -> usize {
        self.h.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasTable {
    pub user: Vec<f64>,
    pub item: Vec<f64>,
}

/// Shape information needed to lay out a [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub variant: Variant,
    pub num_users: usize,
    pub num_items: usize,
    pub embedding_dim: usize,
    pub attention_dim: usize,
    pub visual_dim: usize,
    /// Hidden width of the feature networks (equal to the textual width).
    pub hidden_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub variant: Variant,
    /// `P`: item factors in the history role.
    pub history_embeddings: Matrix,
    /// `Q`: item factors in the target role.
    pub target_embeddings: Matrix,
    pub irn: Option<IrnParams>,
    pub feature_net: Option<FeatureNetParams>,
    pub biases: Option<BiasTable>,
}

/// Read-only view of one parameter tensor.
#[derive(Debug)]
pub struct TensorView<'a> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

fn mat<'a>(name: &'static str, m: &'a Matrix) -> TensorView<'a> {
    TensorView {
        name,
        shape: vec![m.rows(), m.cols()],
        data: m.as_slice(),
    }
}

fn vector<'a>(name: &'static str, v: &'a [f64]) -> TensorView<'a> {
    TensorView {
        name,
        shape: vec![v.len()],
        data: v,
    }
}

impl ModelParams {
    /// All-zero parameters laid out for `shape`.
    pub fn zeros(shape: ModelShape) -> Self {
        let ModelShape {
            variant,
            num_users,
            num_items,
            embedding_dim: k,
            attention_dim: a,
            visual_dim,
            hidden_dim,
        } = shape;
        let irn = variant.has_attention().then(|| IrnParams {
            w1: Matrix::zeros(a, k),
            w2: Matrix::zeros(a, k),
            w3: variant.uses_textual().then(|| Matrix::zeros(a, k)),
            w4: variant.uses_textual().then(|| Matrix::zeros(a, k)),
            h: vec![0.0; a],
            b: vec![0.0; a],
        });
        let feature_net = variant.uses_visual().then(|| FeatureNetParams {
            stem_weight: Matrix::zeros(hidden_dim, visual_dim),
            stem_bias: vec![0.0; hidden_dim],
            visual_weight: Matrix::zeros(k, hidden_dim),
            visual_bias: vec![0.0; k],
            textual: variant.uses_textual().then(|| TextualBranch {
                weight: Matrix::zeros(k, hidden_dim),
                bias: vec![0.0; k],
            }),
            share: variant.shares_knowledge().then(|| Matrix::zeros(k, hidden_dim)),
        });
        let biases = (variant == Variant::BiasBaseline).then(|| BiasTable {
            user: vec![0.0; num_users],
            item: vec![0.0; num_items],
        });
        ModelParams {
            variant,
            history_embeddings: Matrix::zeros(num_items, k),
            target_embeddings: Matrix::zeros(num_items, k),
            irn,
            feature_net,
            biases,
        }
    }

    pub fn shape(&self) -> ModelShape {
        let fnet = self.feature_net.as_ref();
        ModelShape {
            variant: self.variant,
            num_users: self.biases.as_ref().map_or(0, |b| b.user.len()),
            num_items: self.history_embeddings.rows(),
            embedding_dim: self.history_embeddings.cols(),
            attention_dim: self.irn.as_ref().map_or(0, IrnParams::hidden_dim),
            visual_dim: fnet.map_or(0, |f| f.stem_weight.cols()),
            hidden_dim: fnet.map_or(0, FeatureNetParams::hidden_dim),
        }
    }

    pub fn num_items(&self) -> usize {
        self.history_embeddings.rows()
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(self.shape())
    }

    /// Every tensor in a fixed order shared by gradients, optimiser state
    /// and checkpoints.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = vec![mat("P", &self.history_embeddings), mat("Q", &self.target_embeddings)];
        if let Some(irn) = &self.irn {
            out.push(mat("irn.W1", &irn.w1));
            out.push(mat("irn.W2", &irn.w2));
            if let Some(w3) = &irn.w3 {
                out.push(mat("irn.W3", w3));
            }
            if let Some(w4) = &irn.w4 {
                out.push(mat("irn.W4", w4));
            }
            out.push(vector("irn.h", &irn.h));
            out.push(vector("irn.b", &irn.b));
        }
        if let Some(f) = &self.feature_net {
            out.push(mat("feat.stem_weight", &f.stem_weight));
            out.push(vector("feat.stem_bias", &f.stem_bias));
            out.push(mat("feat.W_v2v", &f.visual_weight));
            out.push(vector("feat.b_v", &f.visual_bias));
            if let Some(t) = &f.textual {
                out.push(mat("feat.W_t2t", &t.weight));
                out.push(vector("feat.b_t", &t.bias));
            }
            if let Some(s) = &f.share {
                out.push(mat("feat.W_share", s));
            }
        }
        if let Some(b) = &self.biases {
            out.push(vector("bias.user", &b.user));
            out.push(vector("bias.item", &b.item));
        }
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> = vec![
            ("P", self.history_embeddings.as_mut_slice()),
            ("Q", self.target_embeddings.as_mut_slice()),
        ];
        if let Some(irn) = &mut self.irn {
            out.push(("irn.W1", irn.w1.as_mut_slice()));
            out.push(("irn.W2", irn.w2.as_mut_slice()));
            if let Some(w3) = &mut irn.w3 {
                out.push(("irn.W3", w3.as_mut_slice()));
            }
            if let Some(w4) = &mut irn.w4 {
                out.push(("irn.W4", w4.as_mut_slice()));
            }
            out.push(("irn.h", &mut irn.h));
            out.push(("irn.b", &mut irn.b));
        }
        if let Some(f) = &mut self.feature_net {
            out.push(("feat.stem_weight", f.stem_weight.as_mut_slice()));
            out.push(("feat.stem_bias", &mut f.stem_bias));
            out.push(("feat.W_v2v", f.visual_weight.as_mut_slice()));
            out.push(("feat.b_v", &mut f.visual_bias));
            if let Some(t) = &mut f.textual {
                out.push(("feat.W_t2t", t.weight.as_mut_slice()));
                out.push(("feat.b_t", &mut t.bias));
            }
            if let Some(s) = &mut f.share {
                out.push(("feat.W_share", s.as_mut_slice()));
            }
        }
        if let Some(b) = &mut self.biases {
            out.push(("bias.user", &mut b.user));
            out.push(("bias.item", &mut b.item));
        }
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.tensors_mut().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors()
            .into_iter()
            .find(|t| t.data.iter().any(|x| !x.is_finite()))
            .map(|t| t.name)
    }
}

/// Index into `Hyperparams::lambdas` that regularises the named tensor.
pub fn regularization_group(name: &str) -> Option<usize> {
    match name {
        "P" | "Q" => Some(0),
        "irn.W1" | "irn.W2" | "irn.W3" | "irn.W4" => Some(1),
        "feat.stem_weight" | "feat.W_v2v" | "feat.W_t2t" => Some(2),
        "feat.W_share" => Some(3),
        _ => None,
    }
}
