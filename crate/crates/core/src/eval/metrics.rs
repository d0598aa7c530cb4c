use serde::{Deserialize, Serialize};

use crate::{stats, Error, Result};

/// Rank-sum AUC of positive against negative scores; ties count one half.
/// Returns `None` when either side is empty.
pub fn binary_auc(pos: &[f64], neg: &[f64]) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j+1 averaged
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// One-vs-one multiclass AUC: for each unordered class pair, the two
/// directional AUCs on rows of either class are averaged; pairs missing a
/// class are skipped.
pub fn roc_auc_ovo(probs: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() * classes {
        return Err(Error::Data("probability matrix does not match the labels".into()));
    }
    let score = |i: usize, c: usize| probs[i * classes + c];
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..classes {
        for b in a + 1..classes {
            let rows_a: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == a).collect();
            let rows_b: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == b).collect();
            let ab = binary_auc(
                &rows_a.iter().map(|&i| score(i, a)).collect::<Vec<_>>(),
                &rows_b.iter().map(|&i| score(i, a)).collect::<Vec<_>>(),
            );
            let ba = binary_auc(
                &rows_b.iter().map(|&i| score(i, b)).collect::<Vec<_>>(),
                &rows_a.iter().map(|&i| score(i, b)).collect::<Vec<_>>(),
            );
            if let (Some(x), Some(y)) = (ab, ba) {
                total += (x + y) / 2.0;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Data("AUC needs at least two classes present".into()));
    }
    Ok(total / pairs as f64)
}

pub fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    stats::mean(
        &pred
            .iter()
            .zip(truth)
            .map(|(p, t)| (p - t) * (p - t))
            .collect::<Vec<_>>(),
    )
}

/// Ranks and wins of several algorithms over a set of datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub algorithms: Vec<String>,
    /// `scores[dataset][algorithm]`.
    pub scores: Vec<Vec<f64>>,
    /// Dense ranks, 1 is best; `ranks[dataset][algorithm]`.
    pub ranks: Vec<Vec<usize>>,
    pub mean_rank: Vec<f64>,
    pub median_rank: Vec<f64>,
    pub min_rank: Vec<usize>,
    pub max_rank: Vec<usize>,
    pub wins: Vec<usize>,
    /// Wall-clock seconds per algorithm, filled by the caller.
    pub timing_secs: Vec<f64>,
}

/// Dense ranking per dataset; tied scores share the better rank and every
/// first place earns a win. NaN scores rank last.
pub fn rank_and_wins(
    algorithms: &[String],
    scores: &[Vec<f64>],
    higher_is_better: bool,
) -> Result<MetricReport> {
    let k = algorithms.len();
    if k == 0 || scores.is_empty() {
        return Err(Error::Data("empty score matrix".into()));
    }
    if scores.iter().any(|r| r.len() != k) {
        return Err(Error::Data("score matrix is not complete".into()));
    }
    let mut ranks = Vec::with_capacity(scores.len());
    for (d, row) in scores.iter().enumerate() {
        let key = |v: f64| if higher_is_better { -v } else { v };
        let mut distinct: Vec<f64> = row.iter().copied().filter(|v| !v.is_nan()).map(key).collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let worst = distinct.len() + 1;
        let r: Vec<usize> = row
            .iter()
            .enumerate()
            .map(|(a, &v)| {
                if v.is_nan() {
                    log::warn!("dataset {d}: {} scored NaN, ranked last", algorithms[a]);
                    worst
                } else {
                    1 + distinct.partition_point(|&x| x < key(v))
                }
            })
            .collect();
        ranks.push(r);
    }
    let per_alg = |a: usize| ranks.iter().map(|r| r[a]).collect::<Vec<_>>();
    let as_f = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    Ok(MetricReport {
        algorithms: algorithms.to_vec(),
        scores: scores.to_vec(),
        mean_rank: (0..k).map(|a| stats::mean(&as_f(&per_alg(a)))).collect(),
        median_rank: (0..k).map(|a| stats::median(&as_f(&per_alg(a)))).collect(),
        min_rank: (0..k).map(|a| *per_alg(a).iter().min().unwrap()).collect(),
        max_rank: (0..k).map(|a| *per_alg(a).iter().max().unwrap()).collect(),
        wins: (0..k).map(|a| per_alg(a).iter().filter(|&&r| r == 1).count()).collect(),
        timing_secs: vec![0.0; k],
        ranks,
    })
}

/// Summary of one algorithm's scores over repeated splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    /// Mean over datasets of the per-dataset mean over splits.
    pub mean: f64,
    /// Sample std across splits of the dataset-averaged score.
    pub std_of_mean: f64,
    /// Mean over datasets of the per-dataset sample std across splits.
    pub mean_of_std: f64,
}

/// `scores[dataset][split]` for a single algorithm.
pub fn split_summary(scores: &[Vec<f64>]) -> Result<SplitSummary> {
    let splits = scores.first().map(Vec::len).unwrap_or(0);
    if splits == 0 || scores.iter().any(|r| r.len() != splits) {
        return Err(Error::Data("split scores must form a non-empty matrix".into()));
    }
    let per_dataset_mean: Vec<f64> = scores.iter().map(|r| stats::mean(r)).collect();
    let per_split_mean: Vec<f64> = (0..splits)
        .map(|s| stats::mean(&scores.iter().map(|r| r[s]).collect::<Vec<_>>()))
        .collect();
    Ok(SplitSummary {
        mean: stats::mean(&per_dataset_mean),
        std_of_mean: stats::sample_std(&per_split_mean),
        mean_of_std: stats::mean(&scores.iter().map(|r| stats::sample_std(r)).collect::<Vec<_>>()),
    })
}
