//! Classification metrics: confusion matrix, accuracy, F1 and one-vs-rest AUC.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `matrix[true][predicted]`.
pub fn confusion_matrix(labels: &[usize], predictions: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if labels.len() != predictions.len() {
        return Err(Error::Usage(format!(
            "{} labels but {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (i, (&y, &p)) in labels.iter().zip(predictions).enumerate() {
        if y >= classes || p >= classes {
            return Err(Error::Data(format!("sample {i}: class index outside 0..{classes}")));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

pub fn accuracy(confusion: &[Vec<u64>]) -> f64 {
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let hits: u64 = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    hits as f64 / total as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Per-class precision, recall and F1; undefined ratios are reported as 0.
pub fn per_class_scores(confusion: &[Vec<u64>]) -> Vec<ClassScores> {
    let k = confusion.len();
    (0..k)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = (0..k).map(|r| confusion[r][c]).sum();
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if support == 0 { 0.0 } else { tp / support as f64 };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect()
}

/// Mean F1 over classes that occur in the labels or the predictions.
pub fn macro_f1(confusion: &[Vec<u64>]) -> f64 {
    let k = confusion.len();
    let scores = per_class_scores(confusion);
    let present: Vec<usize> = (0..k)
        .filter(|&c| scores[c].support > 0 || (0..k).any(|r| confusion[r][c] > 0))
        .collect();
    if present.is_empty() {
        return 0.0;
    }
    present.iter().map(|&c| scores[c].f1).sum::<f64>() / present.len() as f64
}

/// Support-weighted mean F1.
pub fn weighted_f1(confusion: &[Vec<u64>]) -> f64 {
    let scores = per_class_scores(confusion);
    let total: u64 = scores.iter().map(|s| s.support).sum();
    if total == 0 {
        return 0.0;
    }
    scores.iter().map(|s| s.f1 * s.support as f64).sum::<f64>() / total as f64
}

/// Binary ROC AUC from rank sums, ties counted as one half.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the midrank keeps tie handling exact in integers
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        for &idx in &order[i..=j] {
            if positive[idx] {
                rank_sum2 += mid2;
            }
        }
        i = j + 1;
    }
    let (np, nn) = (n_pos as u64, n_neg as u64);
    // U = R - np(np+1)/2, so 2U = 2R - np(np+1)
    let u2 = rank_sum2 - np * (np + 1);
    Some(u2 as f64 / (2 * np * nn) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    /// Mean over evaluable classes.
    pub macro_auc: f64,
    /// Per-class AUC, `None` where a class has no positives or no negatives.
    pub per_class: Vec<Option<f64>>,
    pub skipped_classes: Vec<usize>,
}

/// One-vs-rest AUC from row-major `[n, k]` scores.
pub fn auc_ovr(scores: &[f64], labels: &[usize], classes: usize) -> Result<AucReport> {
    let n = labels.len();
    if scores.len() != n * classes {
        return Err(Error::Usage(format!(
            "scores hold {} values, expected {n}×{classes}",
            scores.len()
        )));
    }
    if n < 2 {
        return Err(Error::Usage("AUC needs at least two samples".into()));
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut skipped = Vec::new();
    for c in 0..classes {
        let column: Vec<f64> = (0..n).map(|i| scores[i * classes + c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        let auc = binary_auc(&column, &positive);
        if auc.is_none() {
            skipped.push(c);
        }
        per_class.push(auc);
    }
    let evaluable: Vec<f64> = per_class.iter().flatten().copied().collect();
    if evaluable.is_empty() {
        return Err(Error::Usage("no class has both positive and negative samples".into()));
    }
    Ok(AucReport {
        macro_auc: evaluable.iter().sum::<f64>() / evaluable.len() as f64,
        per_class,
        skipped_classes: skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub macro_auc: Option<f64>,
    pub auc_skipped_classes: Vec<usize>,
    pub per_class: Vec<ClassScores>,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    /// Builds the report from softmax probabilities `[n, k]` (row-major) and labels.
    pub fn from_probabilities(probabilities: &[f64], labels: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Usage("cannot score an empty dataset".into()));
        }
        let predictions = argmax_rows(probabilities, classes);
        let confusion = confusion_matrix(labels, &predictions, classes)?;
        let (macro_auc, auc_skipped_classes) = match auc_ovr(probabilities, labels, classes) {
            Ok(r) => (Some(r.macro_auc), r.skipped_classes),
            Err(_) => (None, (0..classes).collect()),
        };
        Ok(MetricsReport {
            samples: labels.len() as u64,
            accuracy: accuracy(&confusion),
            macro_f1: macro_f1(&confusion),
            weighted_f1: weighted_f1(&confusion),
            macro_auc,
            auc_skipped_classes,
            per_class: per_class_scores(&confusion),
            confusion,
        })
    }
}

/// Index of the largest entry per row; the first one wins ties.
pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
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
