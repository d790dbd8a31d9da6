//! Confusion counts and the accuracy / precision / recall / F1 summary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `k x k` count grid indexed `[true][predicted]`, with binary counts taken
/// relative to `positive`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub positive: usize,
    pub counts: Vec<Vec<u64>>,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Each row divided by its sum; rows with no samples stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }
}

/// Tallies `(truth, prediction)` pairs over `classes` labels.
pub fn confusion(
    truth: &[usize],
    predicted: &[usize],
    positive: usize,
    classes: usize,
) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::Metrics(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    if positive >= classes {
        return Err(Error::Metrics(format!(
            "positive class {positive} out of range for {classes} classes"
        )));
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= classes || p >= classes {
            return Err(Error::Metrics(format!(
                "label pair ({t}, {p}) out of range for {classes} classes"
            )));
        }
        counts[t][p] += 1;
        match (t == positive, p == positive) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
        }
    }
    Ok(ConfusionMatrix {
        classes,
        positive,
        counts,
        tp,
        tn,
        fp,
        fn_,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when `tp + fp == 0`; `precision` is then reported as 0.
    pub precision_undefined: bool,
    /// Set when `tp + fn == 0`; `recall` is then reported as 0.
    pub recall_undefined: bool,
    /// Set when `precision + recall == 0`; `f1` is then reported as 0.
    pub f1_undefined: bool,
    pub confusion: ConfusionMatrix,
    pub normalized_confusion: Vec<Vec<f64>>,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Accuracy `(tp + tn) / total`, precision `tp / (tp + fp)`, recall
/// `tp / (tp + fn)`, and `f1 = 2 * precision * recall / (precision + recall)`.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Metrics("confusion matrix is empty".into()));
    }
    let accuracy = (cm.tp + cm.tn) as f64 / total as f64;
    let (precision, precision_undefined) = ratio(cm.tp, cm.tp + cm.fp);
    let (recall, recall_undefined) = ratio(cm.tp, cm.tp + cm.fn_);
    let (f1, f1_undefined) = if precision + recall > 0.0 {
        (2.0 * precision * recall / (precision + recall), false)
    } else {
        (0.0, true)
    };
    Ok(MetricsReport {
        accuracy,
        precision,
        recall,
        f1,
        precision_undefined,
        recall_undefined,
        f1_undefined,
        confusion: cm.clone(),
        normalized_confusion: cm.row_normalized(),
    })
}
