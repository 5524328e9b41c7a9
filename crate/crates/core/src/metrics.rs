//! Classification metrics: rank-statistic AUC, logloss, and accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Evaluation summary for one scored dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub logloss: f64,
    pub accuracy: f64,
}

/// AUC via the Mann-Whitney U statistic with average ranks on ties.
///
/// Errors when only one class is present.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "auc scores/labels",
            left: scores.len(),
            right: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Walk tie groups, assigning the average rank (1-based) to each member.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] > 0.5 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }

    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean binary cross-entropy of probabilities against 0/1 labels, with the
/// usual clamp away from 0 and 1.
pub fn logloss(probs: &[f64], labels: &[f64]) -> f64 {
    let n = probs.len().max(1) as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(1e-15, 1.0 - 1e-15);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Fraction of correct predictions at the 0.5 probability threshold.
pub fn accuracy(probs: &[f64], labels: &[f64]) -> f64 {
    let n = probs.len().max(1) as f64;
    probs
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p >= 0.5) == (y > 0.5))
        .count() as f64
        / n
}

/// Bundle the three metrics for one scored set.
pub fn compute(probs: &[f64], labels: &[f64]) -> Result<Metrics> {
    Ok(Metrics {
        auc: auc(probs, labels)?,
        logloss: logloss(probs, labels),
        accuracy: accuracy(probs, labels),
    })
}
