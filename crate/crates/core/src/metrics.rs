//! Ranking and thresholded multi-label metrics.

use crate::cat::f1;
use crate::error::{CbsaError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub map: f64,
    pub per_class: Vec<Option<f64>>,
    /// Classes without a positive, left out of the mean.
    pub skipped: Vec<usize>,
}

fn check(scores: &Tensor, y: &Tensor) -> Result<()> {
    if scores.dims() != y.dims() {
        return Err(CbsaError::dim(format!("scores {:?} against labels {:?}", scores.shape(), y.shape())));
    }
    Ok(())
}

/// Average precision of one ranking. Equal scores keep index order.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(total / n_pos as f64)
}

pub fn mean_average_precision(scores: &Tensor, y: &Tensor) -> Result<MapReport> {
    check(scores, y)?;
    let (n, c) = scores.dims();
    let mut per_class = Vec::with_capacity(c);
    let mut skipped = Vec::new();
    for k in 0..c {
        let col: Vec<f64> = (0..n).map(|i| scores.at(i, k)).collect();
        let pos: Vec<bool> = (0..n).map(|i| y.at(i, k) > 0.5).collect();
        let ap = average_precision(&col, &pos);
        if ap.is_none() {
            skipped.push(k);
        }
        per_class.push(ap);
    }
    let used: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if used.is_empty() { 0.0 } else { used.iter().sum::<f64>() / used.len() as f64 };
    Ok(MapReport { map, per_class, skipped })
}

/// Macro F1 after binarizing `scores >= threshold`.
pub fn cf1(scores: &Tensor, y: &Tensor, threshold: f64) -> Result<f64> {
    check(scores, y)?;
    let (n, c) = scores.dims();
    if c == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for k in 0..c {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for i in 0..n {
            match (scores.at(i, k) >= threshold, y.at(i, k) > 0.5) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        total += f1(tp, fp, fn_);
    }
    Ok(total / c as f64)
}
