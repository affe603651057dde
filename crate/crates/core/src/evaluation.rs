//! Leave-one-out ranking metrics over 100-candidate lists.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{build_eval_candidates, EvalCase, HoldoutSet, ItemId, SplitBundle, UserId};
use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::model::{Hyperparams, ModelParams, Predictor};

/// Anything that can score a (user, item) pair. Higher is better.
pub trait Scorer: Sync {
    fn score(&self, user: UserId, item: ItemId) -> Result<f64>;
}

impl Scorer for Predictor<'_> {
    fn score(&self, user: UserId, item: ItemId) -> Result<f64> {
        Predictor::score(self, user, item)
    }
}

impl<F> Scorer for F
where
    F: Fn(UserId, ItemId) -> Result<f64> + Sync,
{
    fn score(&self, user: UserId, item: ItemId) -> Result<f64> {
        self(user, item)
    }
}

/// Uniform scores that depend only on `(seed, user, item)`.
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn score(&self, user: UserId, item: ItemId) -> Result<f64> {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&(user as u64).to_le_bytes());
        key[16..24].copy_from_slice(&(item as u64).to_le_bytes());
        Ok(ChaCha8Rng::from_seed(key).random::<f64>())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub user: UserId,
    /// Candidates by descending score, ties by ascending item id.
    pub candidates: Vec<ItemId>,
    pub scores: Vec<f64>,
    /// 1-based rank of the held-out item.
    pub position: usize,
}

/// Scores every candidate of `case` and sorts them.
pub fn rank_candidates(case: &EvalCase, scorer: &dyn Scorer) -> Result<RankedList> {
    let mut scored: Vec<(ItemId, f64)> = case
        .candidates()
        .map(|item| {
            let s = scorer.score(case.user, item)?;
            if s.is_nan() {
                return Err(Error::NonFinite(format!("score of user {} for item {item}", case.user)));
            }
            Ok((item, s))
        })
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let position = scored
        .iter()
        .position(|&(i, _)| i == case.positive)
        .expect("positive is a candidate")
        + 1;
    let (candidates, scores) = scored.into_iter().unzip();
    Ok(RankedList {
        user: case.user,
        candidates,
        scores,
        position,
    })
}

/// Ranks all cases in parallel; output order follows `cases`.
pub fn rank_cases<S: Scorer>(cases: &[EvalCase], scorer: &S) -> Result<Vec<RankedList>> {
    cases.par_iter().map(|c| rank_candidates(c, scorer)).collect()
}

fn check(lists: &[RankedList], n: usize) -> Result<()> {
    if lists.is_empty() {
        return Err(Error::Precondition("no ranked lists to evaluate".into()));
    }
    if n == 0 {
        return Err(Error::Precondition("cut-off N must be at least 1".into()));
    }
    Ok(())
}

/// Fraction of lists whose held-out item ranks within the top `n`.
pub fn hr_at_n(lists: &[RankedList], n: usize) -> Result<f64> {
    check(lists, n)?;
    let hits = lists.iter().filter(|l| l.position <= n).count();
    Ok(hits as f64 / lists.len() as f64)
}

/// Mean of `1 / log2(pos + 1)` over lists, counting zero beyond `n`.
pub fn ndcg_at_n(lists: &[RankedList], n: usize) -> Result<f64> {
    check(lists, n)?;
    let total: f64 = lists
        .iter()
        .filter(|l| l.position <= n)
        .map(|l| 1.0 / ((l.position + 1) as f64).log2())
        .sum();
    Ok(total / lists.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsAtN {
    pub n: usize,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metrics: Vec<MetricsAtN>,
    pub num_users: usize,
    pub lists: Vec<RankedList>,
}

impl EvalReport {
    pub fn from_lists(lists: Vec<RankedList>, top_n: &[usize]) -> Result<Self> {
        let metrics = top_n
            .iter()
            .map(|&n| {
                Ok(MetricsAtN {
                    n,
                    hr: hr_at_n(&lists, n)?,
                    ndcg: ndcg_at_n(&lists, n)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            metrics,
            num_users: lists.len(),
            lists,
        })
    }

    pub fn hr(&self, n: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.n == n).map(|m| m.hr)
    }

    pub fn ndcg(&self, n: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.n == n).map(|m| m.ndcg)
    }

    /// `metric,N,value` rows, six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,N,value\n");
        for m in &self.metrics {
            let _ = writeln!(out, "hr,{},{:.6}", m.n, m.hr);
            let _ = writeln!(out, "ndcg,{},{:.6}", m.n, m.ndcg);
        }
        out
    }

    /// `user,pos,candidate_ids...` per list, using the dataset's raw ids.
    pub fn ranked_lists_csv(&self, split: &SplitBundle) -> String {
        let mut out = String::new();
        for l in &self.lists {
            let _ = write!(out, "{},{}", split.full.user_token(l.user), l.position);
            for &c in &l.candidates {
                let _ = write!(out, ",{}", split.full.item_token(c));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Evaluates cases with any scorer at every cut-off in `top_n`.
pub fn evaluate_with<S: Scorer>(cases: &[EvalCase], scorer: &S, top_n: &[usize]) -> Result<EvalReport> {
    EvalReport::from_lists(rank_cases(cases, scorer)?, top_n)
}

/// Full protocol: candidates for `which` (seeded by `hp.seed`), ranked by
/// the model, metrics at every `hp.top_n`.
pub fn evaluate(
    split: &SplitBundle,
    store: Option<&FeatureStore>,
    params: &ModelParams,
    hp: &Hyperparams,
    which: HoldoutSet,
) -> Result<EvalReport> {
    let cases = build_eval_candidates(split, which, hp.seed)?;
    let predictor = Predictor::new(params, hp, split, store)?;
    evaluate_with(&cases, &predictor, &hp.top_n)
}
