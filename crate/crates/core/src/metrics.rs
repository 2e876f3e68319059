//! Classification metrics and run aggregation.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Area under the ROC curve via the Mann-Whitney rank statistic.
///
/// Tied scores receive their mid-rank, which counts a tied positive/negative
/// pair as one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::invalid(format!("score {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid(
            "AUROC needs both positive and negative samples",
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    // Twice the rank sum of positives keeps mid-ranks integral.
    let mut doubled_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share the mid-rank (i + 1 + j) / 2
        let doubled_mid = (i + 1 + j) as u64;
        let pos_in_run = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        doubled_rank_sum += doubled_mid * pos_in_run;
        i = j;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2 * p * n) as f64)
}

/// Macro-averaged one-vs-rest AUROC over the columns of `scores`.
///
/// Classes absent from `labels` (or covering every row) are skipped.
pub fn macro_auroc(scores: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    if scores.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: scores.nrows(),
        });
    }
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..scores.ncols() {
        let is_c: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let present = is_c.iter().filter(|&&b| b).count();
        if present == 0 || present == labels.len() {
            continue;
        }
        let column: Vec<f64> = scores.column(c).iter().copied().collect();
        total += auroc(&column, &is_c)?;
        used += 1;
    }
    if used < 2 && scores.ncols() > 2 {
        return Err(Error::invalid(
            "macro AUROC needs at least two represented classes",
        ));
    }
    if used == 0 {
        return Err(Error::invalid(
            "AUROC needs both positive and negative samples",
        ));
    }
    Ok(total / used as f64)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: predictions.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows(scores: &DMatrix<f64>) -> Vec<usize> {
    scores
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Mean and population standard deviation of repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub n_runs: usize,
    pub values: Vec<f64>,
}

pub fn summarize(values: &[f64]) -> Result<MetricSummary> {
    if values.is_empty() {
        return Err(Error::invalid("cannot summarize an empty list"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    // keep the mean inside [min, max] despite rounding
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    Ok(MetricSummary {
        mean: mean.clamp(lo, hi),
        std: var.sqrt(),
        n_runs: values.len(),
        values: values.to_vec(),
    })
}
