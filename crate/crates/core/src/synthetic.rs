//! Seeded synthetic corpora with planted structure, used by the tests and
//! handy for smoke runs of the CLI.
//!
//! Every item belongs to one of `clusters` groups and, independently, to
//! one of `facets` groups. Visual features reveal the cluster only;
//! textual features reveal the facet plus a weaker copy of the cluster.
//! Each user prefers one cluster and one facet and samples items with
//! weight `popularity × cluster_affinity^[same cluster] ×
//! facet_affinity^[same facet]`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample_weighted;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{InteractionDataset, ItemId};
use crate::error::{Error, Result};
use crate::features::{write_feature_file, FeatureStore};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub clusters: usize,
    pub facets: usize,
    pub visual_dim: usize,
    pub textual_dim: usize,
    /// Inclusive range of positives per user.
    pub min_interactions: usize,
    pub max_interactions: usize,
    pub cluster_affinity: f64,
    pub facet_affinity: f64,
    /// Zipf-like exponent of item popularity.
    pub popularity_skew: f64,
    /// Standard deviation of the feature noise (centroids have unit scale).
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_users: 200,
            num_items: 200,
            clusters: 2,
            facets: 4,
            visual_dim: 16,
            textual_dim: 8,
            min_interactions: 12,
            max_interactions: 24,
            cluster_affinity: 12.0,
            facet_affinity: 4.0,
            popularity_skew: 0.3,
            feature_noise: 0.3,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub data: InteractionDataset,
    pub store: FeatureStore,
    pub item_cluster: Vec<usize>,
    pub item_facet: Vec<usize>,
    pub user_cluster: Vec<usize>,
    pub user_facet: Vec<usize>,
}

fn centroids(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            (0..dim)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect()
        })
        .collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    if spec.clusters == 0 || spec.facets == 0 || spec.num_items == 0 || spec.num_users == 0 {
        return Err(Error::Precondition(
            "synthetic corpus needs users, items, clusters and facets".into(),
        ));
    }
    if spec.min_interactions > spec.max_interactions || spec.max_interactions > spec.num_items {
        return Err(Error::Precondition(
            "interaction range does not fit the item count".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.feature_noise).map_err(|e| Error::Precondition(e.to_string()))?;

    let item_cluster: Vec<usize> = (0..spec.num_items).map(|i| i % spec.clusters).collect();
    let item_facet: Vec<usize> = (0..spec.num_items).map(|_| rng.random_range(0..spec.facets)).collect();
    let popularity: Vec<f64> = (0..spec.num_items)
        .map(|_| {
            rng.random_range(1.0..(spec.num_items as f64))
                .powf(-spec.popularity_skew)
        })
        .collect();

    let visual_centres = centroids(&mut rng, spec.clusters, spec.visual_dim);
    let text_cluster = centroids(&mut rng, spec.clusters, spec.textual_dim);
    let text_facet = centroids(&mut rng, spec.facets, spec.textual_dim);
    let mut visual = Matrix::zeros(spec.num_items, spec.visual_dim);
    let mut textual = Matrix::zeros(spec.num_items, spec.textual_dim);
    for i in 0..spec.num_items {
        for (d, x) in visual.row_mut(i).iter_mut().enumerate() {
            *x = visual_centres[item_cluster[i]][d] + noise.sample(&mut rng);
        }
        for (d, x) in textual.row_mut(i).iter_mut().enumerate() {
            *x = text_facet[item_facet[i]][d] + 0.5 * text_cluster[item_cluster[i]][d] + noise.sample(&mut rng);
        }
    }

    let mut user_cluster = Vec::with_capacity(spec.num_users);
    let mut user_facet = Vec::with_capacity(spec.num_users);
    let mut positives = Vec::with_capacity(spec.num_users);
    for _ in 0..spec.num_users {
        let c = rng.random_range(0..spec.clusters);
        let f = rng.random_range(0..spec.facets);
        let count = rng.random_range(spec.min_interactions..=spec.max_interactions);
        let weight = |i: ItemId| {
            let mut w = popularity[i];
            if item_cluster[i] == c {
                w *= spec.cluster_affinity;
            }
            if item_facet[i] == f {
                w *= spec.facet_affinity;
            }
            w
        };
        let items: Vec<ItemId> = sample_weighted(&mut rng, spec.num_items, weight, count)
            .map_err(|e| Error::Precondition(e.to_string()))?
            .into_iter()
            .collect();
        user_cluster.push(c);
        user_facet.push(f);
        positives.push(items);
    }

    Ok(SyntheticCorpus {
        data: InteractionDataset::from_positives(spec.num_items, positives)?,
        store: FeatureStore::new(visual, textual)?,
        item_cluster,
        item_facet,
        user_cluster,
        user_facet,
    })
}

/// Paths of a corpus written to disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusFiles {
    pub interactions: PathBuf,
    pub visual: PathBuf,
    pub textual: PathBuf,
}

/// Writes `interactions.tsv`, `visual.feat` and `textual.feat` into `dir`.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<CorpusFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = CorpusFiles {
        interactions: dir.join("interactions.tsv"),
        visual: dir.join("visual.feat"),
        textual: dir.join("textual.feat"),
    };
    let data = &corpus.data;
    let mut out = String::new();
    for u in 0..data.num_users() {
        for &i in data.positives(u) {
            let _ = writeln!(out, "{}\t{}", data.user_token(u), data.item_token(i));
        }
    }
    fs::write(&files.interactions, out).map_err(|e| Error::io(&files.interactions, e))?;

    let store = &corpus.store;
    let mut visual = Matrix::zeros(data.num_items(), store.visual_dim());
    let mut textual = Matrix::zeros(data.num_items(), store.textual_dim());
    for i in 0..data.num_items() {
        visual.row_mut(i).copy_from_slice(store.visual(i));
        textual.row_mut(i).copy_from_slice(store.textual(i));
    }
    write_feature_file(&files.visual, data.item_ids(), &visual)?;
    write_feature_file(&files.textual, data.item_ids(), &textual)?;
    Ok(files)
}
