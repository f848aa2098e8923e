//! Label-specific features, one-to-one alignment degrees and the zero-shot
//! softmax rule.

use serde::{Deserialize, Serialize};

use crate::error::{CbsaError, Result};
use crate::nn::{decoder_forward, DecoderLayer, Session};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    /// Multiplies the cosine before the sigmoid.
    pub logit_scale: f64,
    /// Temperature of the zero-shot softmax.
    pub temperature: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            logit_scale: 10.0,
            temperature: 0.07,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.logit_scale > 0.0 && self.temperature > 0.0) {
            return Err(CbsaError::Spec(format!(
                "logit_scale {} and temperature {} must be positive",
                self.logit_scale, self.temperature
            )));
        }
        Ok(())
    }
}

/// `z = decoder(t_s, l, l)`: row `k` is the class-`k` image feature.
pub fn extract_label_specific(
    s: &mut Session,
    l: Var,
    t_s: Var,
    decoder: &[DecoderLayer],
) -> Result<Var> {
    decoder_forward(s, t_s, l, decoder)
}

/// `sigmoid(scale * cos(z_k, t_t_k))` for each `k`, returned as a `1 x C` row.
///
/// Row `k` of `z` only ever meets row `k` of `t_t`.
pub fn alignment_degrees(s: &mut Session, z: Var, t_t: Var, cfg: &AlignmentConfig) -> Result<Var> {
    let c = s.value(z).rows();
    let zn = s.tape.l2_normalize_rows(z)?;
    let tn = s.tape.l2_normalize_rows(t_t)?;
    let cos = s.tape.row_dot(zn, tn)?;
    let logits = s.tape.scale(cos, cfg.logit_scale);
    let p = s.tape.sigmoid(logits);
    s.tape.reshape(p, vec![1, c])
}

/// Softmax over `cos(h, w_k) / temperature`.
pub fn zero_shot_softmax(h: &[f64], w: &Tensor, cfg: &AlignmentConfig) -> Result<Vec<f64>> {
    if cfg.temperature <= 0.0 {
        return Err(CbsaError::Contract("temperature must be positive".into()));
    }
    if h.len() != w.cols() {
        return Err(CbsaError::dim(format!(
            "feature of length {} against class matrix {:?}",
            h.len(),
            w.shape()
        )));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let hn = norm(h);
    if hn <= 1e-12 {
        return Err(CbsaError::DegenerateRow { row: 0, norm: hn, eps: 1e-12 });
    }
    let mut logits = Vec::with_capacity(w.rows());
    for k in 0..w.rows() {
        let row = w.row(k);
        let wn = norm(row);
        if wn <= 1e-12 {
            return Err(CbsaError::DegenerateRow { row: k, norm: wn, eps: 1e-12 });
        }
        let dot: f64 = h.iter().zip(row).map(|(a, b)| a * b).sum();
        logits.push(dot / (hn * wn) / cfg.temperature);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}
