mod common;

use std::collections::HashSet;

use iris::dataset::{
    build_eval_candidates, leave_one_out_split, sample_train_negatives, EvalCase, HoldoutSet, InteractionDataset,
    EVAL_NEGATIVES,
};
use iris::evaluation::{evaluate_with, hr_at_n, ndcg_at_n, rank_cases, RandomScorer};
use iris::Result;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `users` cases of 100 distinct candidates drawn from 0..400.
fn random_cases(users: usize, seed: u64) -> Vec<EvalCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..users)
        .map(|user| {
            let mut pool: Vec<usize> = (0..400).collect();
            pool.shuffle(&mut rng);
            EvalCase {
                user,
                positive: pool[0],
                negatives: pool[1..=EVAL_NEGATIVES].to_vec(),
            }
        })
        .collect()
}

/// Position of the positive by counting the candidates that beat it.
fn brute_position(case: &EvalCase, score: &dyn Fn(usize, usize) -> f64) -> usize {
    let target = score(case.user, case.positive);
    1 + case
        .negatives
        .iter()
        .filter(|&&i| {
            let s = score(case.user, i);
            s > target || (s == target && i < case.positive)
        })
        .count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_match_a_brute_force_recount(seed in any::<u64>(), users in 1usize..=50, coarse in any::<bool>()) {
        let cases = random_cases(users, seed);
        // coarse scores produce plenty of ties
        let table: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            (0..users * 400).map(|_| if coarse { f64::from(rng.random_range(0..5u8)) } else { rng.random() }).collect()
        };
        let score = |u: usize, i: usize| table[u * 400 + i];
        let scorer = |u: usize, i: usize| -> Result<f64> { Ok(score(u, i)) };
        let top_n = [1, 5, 10, 20];
        let report = evaluate_with(&cases, &scorer, &top_n).unwrap();
        let positions: Vec<usize> = cases.iter().map(|c| brute_position(c, &score)).collect();
        for (list, &pos) in report.lists.iter().zip(&positions) {
            prop_assert_eq!(list.position, pos);
            prop_assert_eq!(list.candidates.len(), 100);
            prop_assert!(list.scores.windows(2).all(|w| w[0] >= w[1]));
        }
        for n in top_n {
            let hits = positions.iter().filter(|&&p| p <= n).count();
            let hr = hits as f64 / users as f64;
            prop_assert_eq!(report.hr(n).unwrap().to_bits(), hr.to_bits());
            let mut gains = 0.0;
            for &p in &positions {
                if p <= n {
                    gains += 1.0 / ((p + 1) as f64).ln() * 2f64.ln();
                }
            }
            let ndcg = gains / users as f64;
            prop_assert!((report.ndcg(n).unwrap() - ndcg).abs() <= 1e-12);
        }
    }

    #[test]
    fn metrics_grow_with_n_and_ignore_user_order(seed in any::<u64>(), users in 2usize..=50) {
        let mut cases = random_cases(users, seed);
        let scorer = RandomScorer { seed };
        let top_n = [1, 5, 10, 20, 50, 100];
        let report = evaluate_with(&cases, &scorer, &top_n).unwrap();
        for w in top_n.windows(2) {
            prop_assert!(report.hr(w[0]).unwrap() <= report.hr(w[1]).unwrap());
            prop_assert!(report.ndcg(w[0]).unwrap() <= report.ndcg(w[1]).unwrap());
        }
        prop_assert_eq!(report.hr(100).unwrap(), 1.0);
        cases.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = evaluate_with(&cases, &scorer, &top_n).unwrap();
        for n in top_n {
            prop_assert_eq!(report.hr(n), shuffled.hr(n));
            prop_assert!((report.ndcg(n).unwrap() - shuffled.ndcg(n).unwrap()).abs() <= 1e-15);
        }
    }

    #[test]
    fn split_partitions_positives(seed in any::<u64>(), sizes in prop::collection::vec(3usize..15, 1..20)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positives: Vec<Vec<usize>> = sizes
            .iter()
            .map(|&k| {
                let mut pool: Vec<usize> = (0..150).collect();
                pool.shuffle(&mut rng);
                pool.truncate(k);
                pool
            })
            .collect();
        let data = InteractionDataset::from_positives(150, positives).unwrap();
        let split = leave_one_out_split(&data, seed).unwrap();
        prop_assert_eq!(&split, &leave_one_out_split(&data, seed).unwrap());
        for u in 0..data.num_users() {
            let mut all: Vec<usize> = split.train.positives(u).to_vec();
            all.push(split.validation[u].item);
            all.push(split.test[u].item);
            let unique: HashSet<usize> = all.iter().copied().collect();
            prop_assert_eq!(unique.len(), all.len());
            let original: HashSet<usize> = data.positives(u).iter().copied().collect();
            prop_assert_eq!(unique, original);
        }
        for inst in sample_train_negatives(&split, 4, seed, 3).unwrap() {
            prop_assert_eq!(inst.label == 1, split.train.contains(inst.user, inst.item));
            if inst.label == 0 {
                prop_assert!(!split.full.contains(inst.user, inst.item));
            }
        }
        for which in [HoldoutSet::Validation, HoldoutSet::Test] {
            for case in build_eval_candidates(&split, which, seed).unwrap() {
                let negatives: HashSet<usize> = case.negatives.iter().copied().collect();
                prop_assert_eq!(negatives.len(), EVAL_NEGATIVES);
                prop_assert!(case.negatives.iter().all(|&i| !split.full.contains(case.user, i)));
            }
        }
    }
}

#[test]
fn hand_counted_hit_ratio_and_gain() {
    let cases = random_cases(3, 0);
    // place the positive at ranks 1, 11 and 4 by scoring candidates by position
    let wanted = [1usize, 11, 4];
    let scorer = |u: usize, i: usize| -> Result<f64> {
        let case = &cases[u];
        let slot = case.candidates().position(|c| c == i).unwrap();
        let rank = if slot == 0 {
            wanted[u]
        } else if slot < wanted[u] {
            slot
        } else {
            slot + 1
        };
        Ok(-(rank as f64))
    };
    let lists = rank_cases(&cases, &scorer).unwrap();
    assert_eq!(lists.iter().map(|l| l.position).collect::<Vec<_>>(), wanted);
    assert_eq!(hr_at_n(&lists, 10).unwrap(), 2.0 / 3.0);
    let expected = (1.0 + 1.0 / 5f64.log2()) / 3.0;
    assert!((ndcg_at_n(&lists, 10).unwrap() - expected).abs() < 1e-15);
    assert!(hr_at_n(&[], 10).is_err());
    assert!(hr_at_n(&lists, 0).is_err());
}

#[test]
fn perfect_scorer_scores_one_everywhere() {
    let cases = random_cases(20, 4);
    let positives: Vec<usize> = cases.iter().map(|c| c.positive).collect();
    let scorer = |u: usize, i: usize| -> Result<f64> { Ok(if positives[u] == i { 1.0 } else { 0.0 }) };
    let report = evaluate_with(&cases, &scorer, &[1, 10, 20]).unwrap();
    for n in [1, 10, 20] {
        assert_eq!(report.hr(n), Some(1.0));
        assert_eq!(report.ndcg(n), Some(1.0));
    }
}

#[test]
fn metrics_csv_layout() {
    let cases = random_cases(5, 2);
    let report = evaluate_with(&cases, &RandomScorer { seed: 1 }, &[10]).unwrap();
    let csv = report.to_csv();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "metric,N,value");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("hr,10,"));
    assert!(rows[2].starts_with("ndcg,10,"));
    assert_eq!(rows[1].rsplit(',').next().unwrap().split('.').nth(1).unwrap().len(), 6);
}
