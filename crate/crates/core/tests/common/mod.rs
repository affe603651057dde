#![allow(dead_code)]

use iris::dataset::{
    leave_one_out_split, sample_train_negatives, sample_train_triples, SplitBundle, TrainInstance, Triple,
};
use iris::features::FeatureStore;
use iris::model::{Hyperparams, ModelParams, ModelShape, Variant};
use iris::synthetic::{generate, SyntheticSpec};
use iris::training::probe_parameters;

/// 20 users, 30 items, 16-dim visual and 8-dim textual features.
pub fn tiny_corpus(seed: u64) -> (SplitBundle, FeatureStore) {
    let corpus = generate(&SyntheticSpec {
        num_users: 20,
        num_items: 30,
        min_interactions: 5,
        max_interactions: 10,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let split = leave_one_out_split(&corpus.data, seed).unwrap();
    (split, corpus.store)
}

/// Large enough item pool for the 99-negative validation protocol.
pub fn trainable_corpus(seed: u64) -> (SplitBundle, FeatureStore) {
    let corpus = generate(&SyntheticSpec {
        num_users: 30,
        num_items: 120,
        min_interactions: 5,
        max_interactions: 10,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let split = leave_one_out_split(&corpus.data, seed).unwrap();
    (split, corpus.store)
}

pub fn small_hp() -> Hyperparams {
    Hyperparams {
        embedding_dim: 4,
        attention_dim: 3,
        feature_hidden_dim: 8,
        alpha_norm: 0.5,
        beta: 0.8,
        lambdas: [0.01, 0.02, 0.03, 0.04],
        ..Hyperparams::default()
    }
}

pub fn probe(variant: Variant, hp: &Hyperparams, split: &SplitBundle, store: &FeatureStore, seed: u64) -> ModelParams {
    let shape = ModelShape::for_data(variant, hp, split.num_users(), split.num_items(), Some(store));
    probe_parameters(shape, seed, 0.3)
}

pub fn pointwise_batch(split: &SplitBundle, size: usize) -> Vec<TrainInstance> {
    let mut b = sample_train_negatives(split, 4, 9, 1).unwrap();
    b.truncate(size);
    b
}

pub fn pairwise_batch(split: &SplitBundle, size: usize) -> Vec<Triple> {
    let mut b = sample_train_triples(split, 4, 9, 1).unwrap();
    b.truncate(size);
    b
}
