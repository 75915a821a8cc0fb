//! Ranking, classification and cross-validation utilities.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Which end of the score scale is best.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    /// Higher scores rank first.
    Descending,
    /// Lower values (distances) rank first.
    Ascending,
}

/// Rank of `scores[truth]`, with a tied block sharing its mean rank. A NaN
/// truth score ranks last.
pub fn rank_of(scores: &[f64], truth: usize, order: Order) -> f64 {
    let target = scores[truth];
    if target.is_nan() {
        return scores.len() as f64;
    }
    let better = scores
        .iter()
        .filter(|&&s| match order {
            Order::Descending => s > target,
            Order::Ascending => s < target,
        })
        .count();
    let tied = scores.iter().filter(|&&s| s == target).count();
    better as f64 + (tied as f64 + 1.0) / 2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingSummary {
    pub mr: f64,
    pub mrr: f64,
    /// Keyed by k.
    pub hits: BTreeMap<usize, f64>,
}

pub fn summarize_ranks(ranks: &[f64], ks: &[usize]) -> Result<RankingSummary> {
    if ranks.is_empty() {
        return invalid("no ranks to summarise");
    }
    let n = ranks.len() as f64;
    let hits = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k as f64).count() as f64 / n))
        .collect();
    Ok(RankingSummary {
        mr: ranks.iter().sum::<f64>() / n,
        mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
        hits,
    })
}

/// Expected Hits@k of a uniformly random ranking over `candidates` items.
pub fn random_hits_expectation(candidates: usize, k: usize) -> f64 {
    if candidates == 0 {
        return 0.0;
    }
    k.min(candidates) as f64 / candidates as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when no positives were predicted; precision is then reported as 0.
    pub precision_undefined: bool,
}

pub fn classification_metrics(preds: &[bool], labels: &[bool]) -> Result<ClassificationMetrics> {
    if preds.len() != labels.len() || preds.is_empty() {
        return invalid("predictions and labels must be non-empty and equal length");
    }
    let (mut tp, mut fp, mut fneg, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in preds.iter().zip(labels) {
        match (p, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ClassificationMetrics {
        accuracy: ratio(tp + tn, preds.len()),
        precision,
        recall,
        f1,
        precision_undefined: tp + fp == 0,
    })
}

/// Shuffles `0..n` and deals it into `k` folds whose sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 3 {
        return invalid("k-fold protocol needs k >= 3");
    }
    if n < k {
        return invalid(format!("dataset of {n} items is smaller than {k} folds"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, item) in idx.into_iter().enumerate() {
        folds[i % k].push(item);
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Rotation `i` tests on fold `i`, validates on fold `i + 1` and trains on the rest.
pub fn rotations(folds: &[Vec<usize>]) -> Vec<FoldAssignment> {
    let k = folds.len();
    (0..k)
        .map(|i| FoldAssignment {
            test: folds[i].clone(),
            valid: folds[(i + 1) % k].clone(),
            train: (0..k)
                .filter(|&j| j != i && j != (i + 1) % k)
                .flat_map(|j| folds[j].iter().copied())
                .collect(),
        })
        .collect()
}

/// Ascending ranks with ties sharing their mean rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return invalid("spearman needs two equal-length samples of size >= 2");
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn rank_basics() {
        let s = [0.9, 0.1, 0.5, 0.3, 0.2];
        assert_eq!(rank_of(&s, 0, Order::Descending), 1.0);
        let r = summarize_ranks(&[1.0], &[1, 3]).unwrap();
        assert_eq!((r.mr, r.mrr, r.hits[&1]), (1.0, 1.0, 1.0));
        assert_eq!(rank_of(&[0.9, 0.9, 0.1], 0, Order::Descending), 1.5);
        assert_eq!(rank_of(&[0.2, 0.2, 0.5], 1, Order::Ascending), 1.5);
        assert_eq!(rank_of(&[0.4, f64::NAN, 0.1], 1, Order::Ascending), 3.0);
        assert_eq!(rank_of(&[0.4, f64::NAN, 0.1], 1, Order::Descending), 3.0);
    }

    #[test]
    fn random_scores_mean_rank_monte_carlo() {
        let n = 9;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ranks: Vec<f64> = (0..10_000)
            .map(|_| {
                let s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
                rank_of(&s, 0, Order::Descending)
            })
            .collect();
        let mr = mean(&ranks);
        let expect = (n as f64 + 1.0) / 2.0;
        assert!((mr - expect).abs() / expect < 0.02, "{mr}");
    }

    #[test]
    fn classification_cases() {
        let y = [true, false, true, false];
        let m = classification_metrics(&y, &y).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
        let m = classification_metrics(&[true; 4], &y).unwrap();
        assert_eq!((m.recall, m.accuracy), (1.0, 0.5));
        let m = classification_metrics(&[false; 4], &y).unwrap();
        assert!(m.precision_undefined);
        assert_eq!(m.precision, 0.0);
        let p = [true, true, false, false, true, false];
        let l = [true, false, true, false, true, true];
        let m = classification_metrics(&p, &l).unwrap();
        // tp 2, fp 1, fn 2, tn 1
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.recall - 0.5).abs() < 1e-12);
        assert!((m.accuracy - 0.5).abs() < 1e-12);
        assert!((m.f1 - 2.0 * (2.0 / 3.0) * 0.5 / (2.0 / 3.0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn spearman_perfect_and_reversed() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &[10.0, 20.0, 30.0, 40.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    proptest! {
        #[test]
        fn folds_partition(n in 5usize..200, k in 3usize..8, seed in 0u64..1000) {
            prop_assume!(n >= k);
            let folds = kfold_split(n, k, seed).unwrap();
            let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut tested = vec![0; n];
            for r in rotations(&folds) {
                for &i in &r.test { tested[i] += 1; }
                prop_assert_eq!(r.train.len() + r.valid.len() + r.test.len(), n);
            }
            prop_assert!(tested.iter().all(|&c| c == 1));
            prop_assert_eq!(folds, kfold_split(n, k, seed).unwrap());
        }

        #[test]
        fn hits_monotone_and_mrr_bounded(ranks in proptest::collection::vec(1usize..30, 1..50)) {
            let r: Vec<f64> = ranks.iter().map(|&x| x as f64).collect();
            let s = summarize_ranks(&r, &[1, 3, 10]).unwrap();
            prop_assert!(s.hits[&1] <= s.hits[&3] && s.hits[&3] <= s.hits[&10]);
            let max = r.iter().cloned().fold(1.0, f64::max);
            prop_assert!(s.mrr <= 1.0 && s.mrr >= 1.0 / max - 1e-12);
        }
    }

    #[test]
    fn kfold_rejects_small() {
        assert!(kfold_split(2, 5, 0).is_err());
        assert!(kfold_split(10, 2, 0).is_err());
    }
}
