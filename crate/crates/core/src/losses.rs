//! Asymmetric loss, the alignment losses and the context auxiliary loss.

use serde::{Deserialize, Serialize};

use crate::context::context_pseudo;
use crate::error::{CbsaError, Result};
use crate::nn::Session;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Probabilities are clamped into `[ASL_EPS, 1 - ASL_EPS]` before the logs.
pub const ASL_EPS: f64 = 1e-7;
/// Floor applied to probabilities before the cross-entropy log.
pub const CE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AslParams {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
}

impl Default for AslParams {
    fn default() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 2.0,
        }
    }
}

impl AslParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_pos >= 0.0 && self.gamma_neg >= 0.0) {
            return Err(CbsaError::Spec("ASL focusing parameters must be non-negative".into()));
        }
        Ok(())
    }
}

/// `-(1-p)^g1 ln p` for a positive, `-p^g2 ln(1-p)` for a negative.
pub fn asl(p: f64, y: bool, params: &AslParams) -> f64 {
    let p = p.clamp(ASL_EPS, 1.0 - ASL_EPS);
    if y {
        -(1.0 - p).powf(params.gamma_pos) * p.ln()
    } else {
        -p.powf(params.gamma_neg) * (1.0 - p).ln()
    }
}

/// Per-cell ASL of `p` against `targets`, summed over cells where `mask` is 1
/// and divided by the number of such cells. An all-zero mask yields 0.
fn masked_asl(s: &mut Session, p: Var, targets: &Tensor, mask: &Tensor, params: &AslParams) -> Result<Var> {
    let shape = s.value(p).shape().to_vec();
    if targets.shape() != shape.as_slice() || mask.shape() != shape.as_slice() {
        return Err(CbsaError::dim(format!(
            "loss on {:?} with targets {:?} and mask {:?}",
            shape,
            targets.shape(),
            mask.shape()
        )));
    }
    let count = mask.sum();
    if count == 0.0 {
        return Ok(s.constant(Tensor::scalar(0.0)));
    }
    let pc = s.tape.clamp(p, ASL_EPS, 1.0 - ASL_EPS);
    let one_minus = s.tape.affine(pc, -1.0, 1.0);
    let log_p = s.tape.log(pc)?;
    let log_q = s.tape.log(one_minus)?;
    let w_pos = s.tape.pow(one_minus, params.gamma_pos)?;
    let w_neg = s.tape.pow(pc, params.gamma_neg)?;
    let pos = s.tape.mul(w_pos, log_p)?;
    let neg = s.tape.mul(w_neg, log_q)?;

    let pos_mask = targets.zip_map(mask, |y, m| y * m)?;
    let neg_mask = targets.zip_map(mask, |y, m| (1.0 - y) * m)?;
    let pos_mask = s.constant(pos_mask);
    let neg_mask = s.constant(neg_mask);
    let pos = s.tape.mul(pos, pos_mask)?;
    let neg = s.tape.mul(neg, neg_mask)?;
    let both = s.tape.add(pos, neg)?;
    let total = s.tape.sum(both);
    Ok(s.tape.scale(total, -1.0 / count))
}

/// Mean ASL over every cell of a labeled batch.
pub fn sup_alignment_loss(s: &mut Session, p: Var, y: &Tensor, params: &AslParams) -> Result<Var> {
    if y.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(CbsaError::Contract("supervised targets must be 0 or 1".into()));
    }
    let mask = Tensor::full(y.shape(), 1.0);
    masked_asl(s, p, y, &mask, params)
}

/// Mean ASL over cells whose pseudo-label is 0 or 1; `-1` cells are ignored.
pub fn unsup_alignment_loss(s: &mut Session, p: Var, y_hat: &Tensor, params: &AslParams) -> Result<Var> {
    if y_hat.data().iter().any(|&v| v != 0.0 && v != 1.0 && v != -1.0) {
        return Err(CbsaError::Contract("pseudo-labels must be in {+1, 0, -1}".into()));
    }
    let mask = y_hat.map(|v| if v < 0.0 { 0.0 } else { 1.0 });
    let targets = y_hat.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    masked_asl(s, p, &targets, &mask, params)
}

/// Mean cross-entropy of probability rows `p` against the given classes.
/// `None` rows are skipped. Returns `None` when every row is skipped.
pub fn cross_entropy_rows(s: &mut Session, p: Var, targets: &[Option<usize>]) -> Result<Option<Var>> {
    let (rows, k) = s.value(p).dims();
    if targets.len() != rows {
        return Err(CbsaError::dim(format!("{} targets for {rows} rows", targets.len())));
    }
    let mut onehot = Tensor::zeros(&[rows, k]);
    let mut count = 0usize;
    for (i, t) in targets.iter().enumerate() {
        if let Some(c) = *t {
            if c >= k {
                return Err(CbsaError::Contract(format!("context label {c} out of range for K={k}")));
            }
            onehot.set(i, c, 1.0);
            count += 1;
        }
    }
    if count == 0 {
        return Ok(None);
    }
    let floored = s.tape.clamp(p, CE_FLOOR, 1.0);
    let logs = s.tape.log(floored)?;
    let onehot = s.constant(onehot);
    let picked = s.tape.mul(logs, onehot)?;
    let total = s.tape.sum(picked);
    Ok(Some(s.tape.scale(total, -1.0 / count as f64)))
}

/// Context auxiliary loss: cross-entropy on labeled context labels plus
/// cross-entropy on unlabeled rows whose weak-view confidence exceeds `tau`,
/// each part averaged over its own included rows.
pub fn aux_loss(
    s: &mut Session,
    labeled: Option<(Var, &[Option<usize>])>,
    unlabeled: Option<(Var, &Tensor)>,
    tau: f64,
) -> Result<Var> {
    let mut parts = Vec::new();
    if let Some((p_a, labels)) = labeled {
        parts.extend(cross_entropy_rows(s, p_a, labels)?);
    }
    if let Some((p_a, q_a)) = unlabeled {
        if q_a.dims() != s.value(p_a).dims() {
            return Err(CbsaError::dim(format!(
                "strong context probabilities {:?} against weak {:?}",
                s.value(p_a).shape(),
                q_a.shape()
            )));
        }
        let mut targets = vec![None; q_a.rows()];
        for (j, c) in context_pseudo(q_a, tau) {
            targets[j] = Some(c);
        }
        parts.extend(cross_entropy_rows(s, p_a, &targets)?);
    }
    match parts.as_slice() {
        [] => Ok(s.constant(Tensor::scalar(0.0))),
        [one] => Ok(*one),
        [a, b] => s.tape.add(*a, *b),
        _ => unreachable!("at most two parts"),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub sup: f64,
    pub unsup: f64,
    pub aux: f64,
    pub total: f64,
}

pub fn total_loss(sup: f64, unsup: f64, aux: f64) -> LossReport {
    LossReport {
        sup,
        unsup,
        aux,
        total: sup + unsup + aux,
    }
}
