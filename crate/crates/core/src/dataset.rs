//! Implicit-feedback interactions, leave-one-out splitting and sampling of
//! training negatives and evaluation candidates.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type UserId = usize;
pub type ItemId = usize;

/// Number of sampled negatives paired with each held-out positive.
pub const EVAL_NEGATIVES: usize = 99;

/// Smallest per-user history that still leaves a train item after the
/// validation and test holdouts are removed.
pub const MIN_POSITIVES_FOR_SPLIT: usize = 3;

/// Bidirectional map between raw id tokens and dense indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMap {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    fn intern(&mut self, token: &str) -> usize {
        if let Some(&idx) = self.index.get(token) {
            return idx;
        }
        let idx = self.tokens.len();
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), idx);
        idx
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, idx: usize) -> Option<&str> {
        self.tokens.get(idx).map(String::as_str)
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Map whose tokens are the decimal indices `0..len`.
    pub fn sequential(len: usize) -> Self {
        let mut map = IdMap::default();
        for i in 0..len {
            map.intern(&i.to_string());
        }
        map
    }
}

/// Users, items and per-user positive item sets. Positives are kept sorted
/// by item index.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    users: Arc<IdMap>,
    items: Arc<IdMap>,
    positives: Vec<Vec<ItemId>>,
}

impl InteractionDataset {
    /// Builds a dataset from dense per-user item lists. Raw ids are the
    /// decimal indices.
    pub fn from_positives(num_items: usize, positives: Vec<Vec<ItemId>>) -> Result<Self> {
        let users = Arc::new(IdMap::sequential(positives.len()));
        let items = Arc::new(IdMap::sequential(num_items));
        Self::with_maps(users, items, positives)
    }

    fn with_maps(users: Arc<IdMap>, items: Arc<IdMap>, mut positives: Vec<Vec<ItemId>>) -> Result<Self> {
        if positives.len() != users.len() {
            return Err(Error::Precondition(format!(
                "{} positive lists for {} users",
                positives.len(),
                users.len()
            )));
        }
        let n = items.len();
        for (u, list) in positives.iter_mut().enumerate() {
            list.sort_unstable();
            let before = list.len();
            list.dedup();
            if list.len() != before {
                return Err(Error::Precondition(format!("user {u} has duplicate positives")));
            }
            if let Some(&bad) = list.iter().find(|&&i| i >= n) {
                return Err(Error::Precondition(format!(
                    "user {u} references item {bad} but only {n} items exist"
                )));
            }
        }
        Ok(InteractionDataset {
            users,
            items,
            positives,
        })
    }

    pub fn num_users(&self) -> usize {
        self.positives.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn positives(&self, user: UserId) -> &[ItemId] {
        &self.positives[user]
    }

    pub fn try_positives(&self, user: UserId) -> Result<&[ItemId]> {
        self.positives
            .get(user)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownUser(user.to_string()))
    }

    pub fn contains(&self, user: UserId, item: ItemId) -> bool {
        self.positives[user].binary_search(&item).is_ok()
    }

    pub fn num_interactions(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }

    pub fn user_ids(&self) -> &IdMap {
        &self.users
    }

    pub fn item_ids(&self) -> &IdMap {
        &self.items
    }

    pub fn user_token(&self, user: UserId) -> &str {
        self.users.token(user).unwrap_or("?")
    }

    pub fn item_token(&self, item: ItemId) -> &str {
        self.items.token(item).unwrap_or("?")
    }
}

/// Parses an interaction file (`user<TAB>item[<TAB>timestamp]` per line)
/// and drops users with fewer than `min_user_interactions` distinct items.
///
/// Users and items are re-indexed densely by first appearance among the
/// retained records.
pub fn load_interactions(path: &Path, min_user_interactions: usize) -> Result<InteractionDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut records: Vec<(&str, &str)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(parse_err(
                lineno + 1,
                format!("expected 2 or 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        for field in &fields[..2] {
            if field.is_empty() || field.chars().any(char::is_whitespace) {
                return Err(parse_err(lineno + 1, format!("invalid id token '{field}'")));
            }
        }
        records.push((fields[0], fields[1]));
    }

    let mut seen = std::collections::HashSet::new();
    records.retain(|pair| seen.insert(*pair));

    let mut counts: HashMap<&str, usize> = HashMap::new();
    for (u, _) in &records {
        *counts.entry(u).or_default() += 1;
    }

    let mut users = IdMap::default();
    let mut items = IdMap::default();
    let mut positives: Vec<Vec<ItemId>> = Vec::new();
    for (u, i) in records {
        if counts[u] < min_user_interactions {
            continue;
        }
        let uid = users.intern(u);
        let iid = items.intern(i);
        if uid == positives.len() {
            positives.push(Vec::new());
        }
        positives[uid].push(iid);
    }
    if positives.is_empty() {
        return Err(Error::EmptyDataset);
    }
    InteractionDataset::with_maps(Arc::new(users), Arc::new(items), positives)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Holdout {
    pub user: UserId,
    pub item: ItemId,
}

/// Leave-one-out partition: per user one test item, one validation item,
/// the rest for training.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitBundle {
    pub full: InteractionDataset,
    pub train: InteractionDataset,
    pub validation: Vec<Holdout>,
    pub test: Vec<Holdout>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HoldoutSet {
    Validation,
    Test,
}

impl HoldoutSet {
    fn stream(self) -> u64 {
        match self {
            HoldoutSet::Validation => u64::MAX - 1,
            HoldoutSet::Test => u64::MAX - 2,
        }
    }
}

impl SplitBundle {
    pub fn holdouts(&self, which: HoldoutSet) -> &[Holdout] {
        match which {
            HoldoutSet::Validation => &self.validation,
            HoldoutSet::Test => &self.test,
        }
    }

    pub fn num_users(&self) -> usize {
        self.train.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.train.num_items()
    }
}

pub fn leave_one_out_split(data: &InteractionDataset, seed: u64) -> Result<SplitBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(data.num_users());
    let mut validation = Vec::with_capacity(data.num_users());
    let mut test = Vec::with_capacity(data.num_users());

    for user in 0..data.num_users() {
        let items = data.positives(user);
        if items.len() < MIN_POSITIVES_FOR_SPLIT {
            return Err(Error::Precondition(format!(
                "user {} has {} positives, need at least {MIN_POSITIVES_FOR_SPLIT} to split",
                data.user_token(user),
                items.len()
            )));
        }
        let len = items.len();
        let test_idx = rng.random_range(0..len);
        let mut val_idx = rng.random_range(0..len - 1);
        if val_idx >= test_idx {
            val_idx += 1;
        }
        test.push(Holdout {
            user,
            item: items[test_idx],
        });
        validation.push(Holdout {
            user,
            item: items[val_idx],
        });
        train.push(
            items
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != test_idx && k != val_idx)
                .map(|(_, &i)| i)
                .collect(),
        );
    }

    let train = InteractionDataset::with_maps(data.users.clone(), data.items.clone(), train)?;
    Ok(SplitBundle {
        full: data.clone(),
        train,
        validation,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainInstance {
    pub user: UserId,
    pub item: ItemId,
    pub label: u8,
}

/// `(user, positive, negative)` sample for pairwise losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub user: UserId,
    pub positive: ItemId,
    pub negative: ItemId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCase {
    pub user: UserId,
    pub positive: ItemId,
    pub negatives: Vec<ItemId>,
}

impl EvalCase {
    /// Positive first, then negatives in sampled order.
    pub fn candidates(&self) -> impl Iterator<Item = ItemId> + '_ {
        std::iter::once(self.positive).chain(self.negatives.iter().copied())
    }
}

/// Draws `count` distinct items from `0..num_items` that are not in the
/// sorted `excluded` slice.
fn sample_excluding<R: Rng>(
    rng: &mut R,
    num_items: usize,
    excluded: &[ItemId],
    count: usize,
) -> std::result::Result<Vec<ItemId>, String> {
    let pool = num_items - excluded.len();
    if pool < count {
        return Err(format!("needs {count} non-interacted items, pool has {pool}"));
    }
    if pool >= 2 * count {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let cand = rng.random_range(0..num_items);
            if excluded.binary_search(&cand).is_err() && !out.contains(&cand) {
                out.push(cand);
            }
        }
        Ok(out)
    } else {
        let candidates: Vec<ItemId> = (0..num_items).filter(|i| excluded.binary_search(i).is_err()).collect();
        Ok(rand::seq::index::sample(rng, candidates.len(), count)
            .into_iter()
            .map(|k| candidates[k])
            .collect())
    }
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// For every train positive, draws `k` distinct negatives from the items the
/// user never interacted with. Returns `(user, positive, negatives)` groups.
fn sample_groups(split: &SplitBundle, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(UserId, ItemId, Vec<ItemId>)>> {
    if k == 0 {
        return Err(Error::Precondition("negative ratio K must be at least 1".into()));
    }
    let n = split.num_items();
    let mut groups = Vec::with_capacity(split.train.num_interactions());
    for user in 0..split.num_users() {
        let excluded = split.full.positives(user);
        for &pos in split.train.positives(user) {
            let negs = sample_excluding(rng, n, excluded, k).map_err(|message| Error::Sampling {
                user: split.full.user_token(user).to_owned(),
                message,
            })?;
            groups.push((user, pos, negs));
        }
    }
    Ok(groups)
}

/// Pointwise training set for one epoch: every train positive with label 1
/// plus `k` sampled negatives with label 0, shuffled. A pure function of
/// `(split, k, seed, epoch)`.
pub fn sample_train_negatives(split: &SplitBundle, k: usize, seed: u64, epoch: u64) -> Result<Vec<TrainInstance>> {
    let mut rng = epoch_rng(seed, epoch);
    let groups = sample_groups(split, k, &mut rng)?;
    let mut out = Vec::with_capacity(groups.len() * (k + 1));
    for (user, pos, negs) in groups {
        out.push(TrainInstance {
            user,
            item: pos,
            label: 1,
        });
        out.extend(negs.into_iter().map(|item| TrainInstance { user, item, label: 0 }));
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Pairwise counterpart of [`sample_train_negatives`]: `k` triples per
/// train positive.
pub fn sample_train_triples(split: &SplitBundle, k: usize, seed: u64, epoch: u64) -> Result<Vec<Triple>> {
    let mut rng = epoch_rng(seed, epoch);
    let groups = sample_groups(split, k, &mut rng)?;
    let mut out = Vec::with_capacity(groups.len() * k);
    for (user, positive, negs) in groups {
        out.extend(negs.into_iter().map(|negative| Triple {
            user,
            positive,
            negative,
        }));
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// One case per user: the held-out item plus [`EVAL_NEGATIVES`] items the
/// user never interacted with.
pub fn build_eval_candidates(split: &SplitBundle, which: HoldoutSet, seed: u64) -> Result<Vec<EvalCase>> {
    let mut rng = epoch_rng(seed, which.stream());
    let n = split.num_items();
    split
        .holdouts(which)
        .iter()
        .map(|h| {
            let negatives =
                sample_excluding(&mut rng, n, split.full.positives(h.user), EVAL_NEGATIVES).map_err(|message| {
                    Error::Sampling {
                        user: split.full.user_token(h.user).to_owned(),
                        message,
                    }
                })?;
            Ok(EvalCase {
                user: h.user,
                positive: h.item,
                negatives,
            })
        })
        .collect()
}

/// Train positives of `user`, with `exclude` removed when present.
pub fn user_history(split: &SplitBundle, user: UserId, exclude: Option<ItemId>) -> Result<Vec<ItemId>> {
    let items = split.train.try_positives(user)?;
    Ok(items.iter().copied().filter(|&i| Some(i) != exclude).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_counts_users_and_items() {
        let f = write_tmp("u0\ti0\nu0\ti1\t123\nu1\ti0\n");
        let d = load_interactions(f.path(), 1).unwrap();
        assert_eq!((d.num_users(), d.num_items()), (2, 2));
        assert_eq!(d.positives(0).len(), 2);

        let d = load_interactions(f.path(), 2).unwrap();
        assert_eq!(d.num_users(), 1);
    }

    #[test]
    fn load_skips_comments_and_dedupes() {
        let f = write_tmp("# header\nu0\ti0\nu0\ti0\n\nu0\ti1\n");
        let d = load_interactions(f.path(), 1).unwrap();
        assert_eq!(d.positives(0), &[0, 1]);
        assert_eq!(d.item_token(1), "i1");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_tmp("u0\ti0\nbroken-line\n");
        match load_interactions(f.path(), 1) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_after_filter_is_an_error() {
        let f = write_tmp("u0\ti0\n");
        assert!(matches!(load_interactions(f.path(), 5), Err(Error::EmptyDataset)));
    }

    #[test]
    fn split_partitions_each_user() {
        let data = InteractionDataset::from_positives(20, vec![vec![1, 2, 3], (0..10).collect()]).unwrap();
        let split = leave_one_out_split(&data, 3).unwrap();
        assert_eq!(split.train.positives(0).len(), 1);
        assert_eq!(split.train.positives(1).len(), 8);
        for u in 0..2 {
            let v = split.validation[u].item;
            let t = split.test[u].item;
            assert_ne!(v, t);
            assert!(!split.train.contains(u, v));
            assert!(!split.train.contains(u, t));
            let mut all: Vec<_> = split.train.positives(u).to_vec();
            all.extend([v, t]);
            all.sort_unstable();
            assert_eq!(all, data.positives(u));
        }
        assert_eq!(split, leave_one_out_split(&data, 3).unwrap());
    }

    #[test]
    fn split_rejects_short_histories() {
        let data = InteractionDataset::from_positives(5, vec![vec![0, 1, 2], vec![3, 4]]).unwrap();
        let err = leave_one_out_split(&data, 0).unwrap_err();
        assert!(err.to_string().contains("user 1"), "{err}");
    }

    #[test]
    fn negative_sampling_ratio_and_purity() {
        let data = InteractionDataset::from_positives(30, vec![vec![0, 1, 2]]).unwrap();
        let split = leave_one_out_split(&data, 1).unwrap();
        let inst = sample_train_negatives(&split, 4, 9, 0).unwrap();
        assert_eq!(inst.len(), 5);
        assert_eq!(inst.iter().filter(|i| i.label == 1).count(), 1);
        for i in inst.iter().filter(|i| i.label == 0) {
            assert!(!data.contains(i.user, i.item));
        }
        assert!(sample_train_negatives(&split, 0, 9, 0).is_err());
    }

    #[test]
    fn negative_sampling_is_epoch_keyed() {
        let data = InteractionDataset::from_positives(200, vec![(0..20).collect(), (50..70).collect()]).unwrap();
        let split = leave_one_out_split(&data, 1).unwrap();
        let a = sample_train_negatives(&split, 4, 5, 0).unwrap();
        let b = sample_train_negatives(&split, 4, 5, 1).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, sample_train_negatives(&split, 4, 5, 0).unwrap());
    }

    #[test]
    fn sampling_fails_when_pool_is_too_small() {
        let data = InteractionDataset::from_positives(5, vec![vec![0, 1, 2]]).unwrap();
        let split = leave_one_out_split(&data, 1).unwrap();
        assert!(matches!(
            sample_train_negatives(&split, 4, 0, 0),
            Err(Error::Sampling { .. })
        ));
    }

    #[test]
    fn eval_candidates_draw_from_complement() {
        let data = InteractionDataset::from_positives(150, vec![(0..10).collect()]).unwrap();
        let split = leave_one_out_split(&data, 2).unwrap();
        let cases = build_eval_candidates(&split, HoldoutSet::Test, 4).unwrap();
        assert_eq!(cases.len(), 1);
        let case = &cases[0];
        assert_eq!(case.negatives.len(), EVAL_NEGATIVES);
        let mut sorted = case.negatives.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), EVAL_NEGATIVES);
        assert!(sorted.iter().all(|&i| i >= 10));
        assert_eq!(cases, build_eval_candidates(&split, HoldoutSet::Test, 4).unwrap());
    }

    #[test]
    fn eval_candidates_need_99_negatives() {
        let data = InteractionDataset::from_positives(100, vec![(0..5).collect()]).unwrap();
        let split = leave_one_out_split(&data, 2).unwrap();
        let err = build_eval_candidates(&split, HoldoutSet::Validation, 0).unwrap_err();
        assert!(matches!(err, Error::Sampling { ref user, .. } if user == "0"));
    }

    #[test]
    fn history_exclusion() {
        let data = InteractionDataset::from_positives(10, vec![vec![1, 2, 3, 4, 5]]).unwrap();
        let split = leave_one_out_split(&data, 0).unwrap();
        let train = split.train.positives(0).to_vec();
        assert_eq!(train.len(), 3);
        let h = user_history(&split, 0, Some(train[1])).unwrap();
        assert_eq!(h, vec![train[0], train[2]]);
        assert_eq!(user_history(&split, 0, Some(9)).unwrap(), train);
        assert!(matches!(user_history(&split, 3, None), Err(Error::UnknownUser(_))));
    }

    #[test]
    fn history_can_become_empty() {
        let data = InteractionDataset::from_positives(10, vec![vec![1, 2, 3]]).unwrap();
        let split = leave_one_out_split(&data, 0).unwrap();
        let only = split.train.positives(0)[0];
        assert!(user_history(&split, 0, Some(only)).unwrap().is_empty());
    }
}
