//! Class-distribution-aware thresholds and `{+1, 0, -1}` pseudo-labels.

use serde::{Deserialize, Serialize};

use crate::error::{CbsaError, Result};
use crate::tensor::Tensor;

/// Pseudo-label for cells that fall between the two thresholds.
pub const IGNORED: f64 = -1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPriors(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatThresholds {
    pub tau_plus: Vec<f64>,
    pub tau_minus: Vec<f64>,
    pub rho: f64,
}

/// Labeled positive frequency of each class.
pub fn estimate_priors(y_labeled: &Tensor) -> Result<ClassPriors> {
    let (m, c) = y_labeled.dims();
    if m == 0 || y_labeled.is_empty() {
        return Err(CbsaError::EmptyLabeled);
    }
    let mut counts = vec![0.0; c];
    for i in 0..m {
        for (k, &v) in y_labeled.row(i).iter().enumerate() {
            counts[k] += v;
        }
    }
    Ok(ClassPriors(counts.into_iter().map(|n| n / m as f64).collect()))
}

/// Number of pseudo-positives and pseudo-negatives for one class.
///
/// The small offsets keep products such as `0.3 * 10` from landing on the
/// wrong side of an integer.
pub fn band_counts(prior: f64, n: usize, rho: f64) -> (usize, usize) {
    let a = ((prior * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n);
    let r = ((rho * (n - a) as f64 + 1e-9).floor().max(0.0) as usize).min(n - a);
    (a, r)
}

pub fn compute_thresholds(q: &Tensor, priors: &ClassPriors, rho: f64) -> Result<CatThresholds> {
    let (n, c) = q.dims();
    if n == 0 {
        return Err(CbsaError::Contract("thresholds need at least one unlabeled instance".into()));
    }
    if priors.0.len() != c {
        return Err(CbsaError::dim(format!("{} priors for {c} classes", priors.0.len())));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(CbsaError::Spec(format!("rho must lie in (0, 1], got {rho}")));
    }
    let mut tau_plus = Vec::with_capacity(c);
    let mut tau_minus = Vec::with_capacity(c);
    let mut column = vec![0.0; n];
    for k in 0..c {
        for (j, slot) in column.iter_mut().enumerate() {
            *slot = q.at(j, k);
        }
        column.sort_by(f64::total_cmp);
        let (a, r) = band_counts(priors.0[k], n, rho);
        let (lo, hi) = (column[0], column[n - 1]);
        tau_plus.push(if a == 0 { hi + 1.0 } else { column[n - a] });
        tau_minus.push(if r == 0 { lo - 1.0 } else { column[r - 1] });
    }
    Ok(CatThresholds {
        tau_plus,
        tau_minus,
        rho,
    })
}

pub fn assign_pseudo_labels(q: &Tensor, th: &CatThresholds) -> Result<Tensor> {
    let (n, c) = q.dims();
    if th.tau_plus.len() != c || th.tau_minus.len() != c {
        return Err(CbsaError::dim(format!("thresholds for {} classes, scores have {c}", th.tau_plus.len())));
    }
    let mut out = Tensor::zeros(&[n, c]);
    for j in 0..n {
        for k in 0..c {
            let v = q.at(j, k);
            let label = if v >= th.tau_plus[k] {
                1.0
            } else if v <= th.tau_minus[k] {
                0.0
            } else {
                IGNORED
            };
            out.set(j, k, label);
        }
    }
    Ok(out)
}

/// Fraction of cells that carry a pseudo-label.
pub fn coverage(y_hat: &Tensor) -> f64 {
    if y_hat.is_empty() {
        return 0.0;
    }
    y_hat.data().iter().filter(|&&v| v != IGNORED).count() as f64 / y_hat.len() as f64
}

/// Macro F1 of pseudo-labels against the truth over non-ignored cells.
pub fn pseudo_label_cf1(y_hat: &Tensor, y_true: &Tensor) -> Result<f64> {
    if y_hat.dims() != y_true.dims() {
        return Err(CbsaError::dim(format!(
            "pseudo-labels {:?} against truth {:?}",
            y_hat.shape(),
            y_true.shape()
        )));
    }
    let (n, c) = y_hat.dims();
    if c == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for k in 0..c {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for j in 0..n {
            let pred = y_hat.at(j, k);
            if pred == IGNORED {
                continue;
            }
            match (pred > 0.0, y_true.at(j, k) > 0.5) {
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

pub(crate) fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if tp == 0 || denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}
