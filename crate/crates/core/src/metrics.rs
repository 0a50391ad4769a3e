//! Classification metrics.
//!
//! Per-class F1 is `2PR/(P+R)` with `0/0 = 0`. The macro average skips
//! classes that occur neither among the labels nor among the predictions;
//! a class seen on only one side contributes an F1 of 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    pub sample_count: usize,
}

/// `class_count`×`class_count` counts, rows true, columns predicted.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], class_count: usize) -> Result<Vec<Vec<u64>>> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0u64; class_count]; class_count];
    for (&p, &l) in preds.iter().zip(labels) {
        for v in [p, l] {
            if v >= class_count {
                return Err(Error::LabelOutOfRange {
                    label: v,
                    classes: class_count,
                });
            }
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Macro-F1 and the per-class scores it averages.
pub fn macro_f1(preds: &[usize], labels: &[usize], class_count: usize) -> Result<(f64, Vec<f64>)> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("macro-F1 of zero samples".into()));
    }
    let cm = confusion_matrix(preds, labels, class_count)?;
    Ok(f1_from_confusion(&cm))
}

fn f1_from_confusion(cm: &[Vec<u64>]) -> (f64, Vec<f64>) {
    let k = cm.len();
    let mut per_class = Vec::with_capacity(k);
    let (mut sum, mut included) = (0.0, 0usize);
    for c in 0..k {
        let tp = cm[c][c] as f64;
        let actual: u64 = cm[c].iter().sum();
        let predicted: u64 = cm.iter().map(|row| row[c]).sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(f1);
        if actual > 0 || predicted > 0 {
            sum += f1;
            included += 1;
        }
    }
    let macro_avg = if included == 0 { 0.0 } else { sum / included as f64 };
    (macro_avg, per_class)
}

impl MetricsReport {
    pub fn compute(preds: &[usize], labels: &[usize], class_count: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("metrics of zero samples".into()));
        }
        let confusion = confusion_matrix(preds, labels, class_count)?;
        let (macro_f1, per_class_f1) = f1_from_confusion(&confusion);
        let correct: u64 = (0..class_count).map(|c| confusion[c][c]).sum();
        Ok(Self {
            accuracy: correct as f64 / labels.len() as f64,
            macro_f1,
            per_class_f1,
            confusion,
            sample_count: labels.len(),
        })
    }
}

/// Index of the largest entry of each row; the first one wins ties.
pub fn argmax_rows(values: &[f64], width: usize) -> Vec<usize> {
    values
        .chunks_exact(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                )
                .0
        })
        .collect()
}
