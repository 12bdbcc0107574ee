//! Accuracy and macro-F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
}

/// Per-class F1 is `2PR/(P+R)`, taken as 0 when `P+R = 0`. Macro-F1 averages
/// over all `num_classes` classes, including ones absent from both inputs.
pub fn compute_metrics(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Metrics> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "metrics need equal non-empty inputs, got {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if num_classes == 0 {
        return Err(Error::Contract("num_classes must be positive".into()));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= num_classes) {
        return Err(Error::Contract(format!("class id {bad} outside [0, {num_classes})")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut true_count = vec![0usize; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        pred_count[p] += 1;
        true_count[l] += 1;
        if p == l {
            tp[p] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class_f1: Vec<f64> = (0..num_classes)
        .map(|c| {
            let precision = ratio(tp[c], pred_count[c]);
            let recall = ratio(tp[c], true_count[c]);
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect();
    Ok(Metrics {
        accuracy: tp.iter().sum::<usize>() as f64 / preds.len() as f64,
        macro_f1: per_class_f1.iter().sum::<f64>() / num_classes as f64,
        per_class_f1,
    })
}
