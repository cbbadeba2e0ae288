use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(macro_f1, micro_f1)`. Macro averages per-class F1 over the classes that
/// occur in `truth` or `pred`; 0/0 precision or recall counts as 0. Micro-F1
/// of single-label predictions is accuracy.
pub fn f1_scores(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(&c) = pred.iter().chain(truth).find(|&&c| c >= num_classes) {
        return Err(Error::Contract(format!("class {c} outside [0, {num_classes})")));
    }
    if truth.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..num_classes {
        if tp[c] + fp[c] + fn_[c] == 0 {
            continue;
        }
        present += 1;
        let precision = ratio(tp[c], tp[c] + fp[c]);
        let recall = ratio(tp[c], tp[c] + fn_[c]);
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    let correct: usize = tp.iter().sum();
    Ok((sum / present as f64, correct as f64 / truth.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrimmedStats {
    pub mean: f64,
    /// Sample standard deviation; 0 when one value is retained.
    pub std: f64,
    pub retained: usize,
}

/// Sorts, drops `⌊n·trim⌋` values from each end, and summarizes the rest.
pub fn trimmed_stats(values: &[f64], trim: f64) -> Result<TrimmedStats> {
    if !(0.0..0.5).contains(&trim) {
        return Err(Error::Contract(format!("trim fraction {trim} outside [0, 0.5)")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("trimmed statistics of non-finite values".into()));
    }
    let n = values.len();
    let k = (n as f64 * trim + 1e-9).floor() as usize;
    if n < 2 * k + 1 {
        return Err(Error::Contract(format!(
            "{n} values leave nothing after trimming {k} from each end"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let kept = &sorted[k..n - k];
    let m = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / m;
    let std = if kept.len() > 1 {
        (kept.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(TrimmedStats {
        mean,
        std,
        retained: kept.len(),
    })
}
