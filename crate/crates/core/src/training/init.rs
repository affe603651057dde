use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::features::FeatureStore;
use crate::model::{Hyperparams, ModelParams, ModelShape, Variant};

/// Standard deviation of the Gaussian used for the latent factors.
pub const EMBEDDING_STD: f64 = 0.01;

/// Half-width of the Xavier-uniform interval.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl ModelShape {
    /// Layout implied by the hyper-parameters and data sizes. Feature widths
    /// come from the store (the textual width doubles as the hidden width).
    pub fn for_data(
        variant: Variant,
        hp: &Hyperparams,
        num_users: usize,
        num_items: usize,
        store: Option<&FeatureStore>,
    ) -> Self {
        ModelShape {
            variant,
            num_users,
            num_items,
            embedding_dim: hp.embedding_dim,
            attention_dim: hp.attention_dim,
            visual_dim: store.map_or(0, FeatureStore::visual_dim),
            hidden_dim: store.map_or(hp.feature_hidden_dim, FeatureStore::textual_dim),
        }
    }
}

/// Latent factors from N(0, 0.01²), weight matrices Xavier-uniform, the
/// attention output vector Xavier-uniform as an `a -> 1` layer, every bias
/// zero. Deterministic in `seed`.
pub fn initialize(shape: ModelShape, seed: u64) -> ModelParams {
    let mut params = ModelParams::zeros(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, EMBEDDING_STD).expect("valid std");
    let k = shape.embedding_dim;
    let a = shape.attention_dim;
    let h = shape.hidden_dim;
    for (name, data) in params.tensors_mut() {
        let fans = match name {
            "P" | "Q" => {
                data.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
                continue;
            }
            "irn.W1" | "irn.W2" | "irn.W3" | "irn.W4" => (k, a),
            "irn.h" => (a, 1),
            "feat.stem_weight" => (shape.visual_dim, h),
            "feat.W_v2v" | "feat.W_t2t" | "feat.W_share" => (h, k),
            _ => continue,
        };
        let bound = xavier_bound(fans.0, fans.1);
        data.iter_mut().for_each(|x| *x = rng.random_range(-bound..=bound));
    }
    params
}
