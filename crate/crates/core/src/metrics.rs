//! Classification metrics computed from exact rank statistics.

use crate::error::{contract, Result};
use serde::Serialize;

/// `K×K` counts, rows are true classes and columns predictions.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1;
    }
    m
}

/// Mean per-class recall over classes present in `truth`.
pub fn balanced_accuracy(truth: &[usize], pred: &[usize], k: usize) -> f64 {
    let m = confusion_matrix(truth, pred, k);
    let recalls: Vec<f64> = (0..k)
        .filter_map(|c| {
            let n: usize = m[c].iter().sum();
            (n > 0).then(|| m[c][c] as f64 / n as f64)
        })
        .collect();
    recalls.iter().sum::<f64>() / recalls.len().max(1) as f64
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    let hit = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
    hit as f64 / truth.len().max(1) as f64
}

/// Cohen's kappa between truth and prediction.
pub fn cohen_kappa(truth: &[usize], pred: &[usize], k: usize) -> f64 {
    let m = confusion_matrix(truth, pred, k);
    let n = truth.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let po = (0..k).map(|c| m[c][c]).sum::<usize>() as f64 / n;
    let pe: f64 = (0..k)
        .map(|c| {
            let row: usize = m[c].iter().sum();
            let col: usize = m.iter().map(|r| r[c]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (n * n);
    if (1.0 - pe).abs() < 1e-15 {
        return if (po - 1.0).abs() < 1e-15 { 1.0 } else { 0.0 };
    }
    (po - pe) / (1.0 - pe)
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(truth: &[usize], pred: &[usize], k: usize) -> f64 {
    let m = confusion_matrix(truth, pred, k);
    let n = truth.len() as f64;
    (0..k)
        .map(|c| {
            let tp = m[c][c] as f64;
            let support: usize = m[c].iter().sum();
            let predicted: usize = m.iter().map(|r| r[c]).sum();
            let denom = support as f64 + predicted as f64;
            let f1 = if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
            f1 * support as f64 / n
        })
        .sum()
}

/// Binary AUROC as the Mann–Whitney statistic with ties counted half.
pub fn auroc_binary(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let np = positive.iter().filter(|&&p| p).count();
    let nn = positive.len() - np;
    if np == 0 || nn == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&t| positive[t]).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum - (np * (np + 1)) as f64 / 2.0;
    Some(u / (np * nn) as f64)
}

/// Area under the precision–recall curve by the trapezoid rule over every
/// distinct score threshold, starting from (recall 0, precision 1).
pub fn auc_pr_binary(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let np = positive.iter().filter(|&&p| p).count();
    if np == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_r, mut prev_p) = (0.0, 1.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &t in &idx[i..=j] {
            if positive[t] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let r = tp as f64 / np as f64;
        let p = tp as f64 / (tp + fp) as f64;
        area += (r - prev_r) * (p + prev_p) / 2.0;
        prev_r = r;
        prev_p = p;
        i = j + 1;
    }
    Some(area)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    /// Binary AUROC, or the macro one-vs-rest mean for more classes.
    pub auroc: f64,
    pub auc_pr: f64,
    pub cohen_kappa: f64,
    pub weighted_f1: f64,
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

/// All metrics from class probabilities (`probs[i]` sums to one).
pub fn evaluate(truth: &[usize], probs: &[Vec<f64>]) -> Result<ClassificationMetrics> {
    if truth.len() != probs.len() || truth.is_empty() {
        return contract("one probability row per label required");
    }
    let k = probs[0].len();
    if k < 2 || probs.iter().any(|r| r.len() != k) || truth.iter().any(|&t| t >= k) {
        return contract("probability rows must share a class count covering every label");
    }
    let pred: Vec<usize> = probs.iter().map(|r| argmax(r)).collect();
    let classes: Vec<usize> = if k == 2 { vec![1] } else { (0..k).collect() };
    let (mut roc, mut pr, mut n) = (0.0, 0.0, 0);
    for c in classes {
        let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        let sc: Vec<f64> = probs.iter().map(|r| r[c]).collect();
        if let (Some(a), Some(b)) = (auroc_binary(&pos, &sc), auc_pr_binary(&pos, &sc)) {
            roc += a;
            pr += b;
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    Ok(ClassificationMetrics {
        accuracy: accuracy(truth, &pred),
        balanced_accuracy: balanced_accuracy(truth, &pred, k),
        auroc: roc / n,
        auc_pr: pr / n,
        cohen_kappa: cohen_kappa(truth, &pred, k),
        weighted_f1: weighted_f1(truth, &pred, k),
    })
}
