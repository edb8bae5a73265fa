//! Accuracy and the MultiRC-style F1a / F1m / EM metrics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{MulteeError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl F1Score {
    /// Counts-based F1. An empty prediction against an empty gold set scores 1.
    pub fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        if predicted == 0 && gold == 0 {
            return F1Score {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        F1Score {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Present for single-correct tasks.
    pub accuracy: Option<f64>,
    pub f1a: F1Score,
    pub f1m: f64,
    pub em: f64,
    pub questions: usize,
    pub choices: usize,
}

/// Fraction of questions whose predicted index equals the gold index.
pub fn metric_accuracy(predictions: &[usize], golds: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(MulteeError::config("eval", "accuracy over an empty prediction set"));
    }
    if predictions.len() != golds.len() {
        return Err(MulteeError::Shape(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    let correct = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// F1a (micro over all question-choice pairs), F1m (mean per-question F1) and exact match.
pub fn metric_multirc(predicted: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<MetricReport> {
    if predicted.len() != gold.len() {
        return Err(MulteeError::Shape(format!(
            "{} predicted sets for {} gold sets",
            predicted.len(),
            gold.len()
        )));
    }
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    let mut f1m = 0.0;
    let mut em = 0;
    for (p, g) in predicted.iter().zip(gold) {
        let p: BTreeSet<usize> = p.iter().copied().collect();
        let g: BTreeSet<usize> = g.iter().copied().collect();
        let hits = p.intersection(&g).count();
        tp += hits;
        n_pred += p.len();
        n_gold += g.len();
        f1m += F1Score::from_counts(hits, p.len(), g.len()).f1;
        em += usize::from(p == g);
    }
    let q = predicted.len();
    let mean = |x: f64| if q == 0 { 0.0 } else { x / q as f64 };
    Ok(MetricReport {
        accuracy: None,
        f1a: F1Score::from_counts(tp, n_pred, n_gold),
        f1m: mean(f1m),
        em: mean(em as f64),
        questions: q,
        choices: 0,
    })
}
