//! AdamW and the one-cycle learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{CbsaError, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OneCycle {
    pub max_lr: f64,
    pub pct_warm: f64,
    /// `start_lr = max_lr / div_start`.
    pub div_start: f64,
    /// `final_lr = max_lr / div_final`.
    pub div_final: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        Self {
            max_lr: 1e-3,
            pct_warm: 0.3,
            div_start: 25.0,
            div_final: 1e4,
        }
    }
}

impl OneCycle {
    pub fn start_lr(&self) -> f64 {
        self.max_lr / self.div_start
    }

    pub fn final_lr(&self) -> f64 {
        self.max_lr / self.div_final
    }
}

/// Linear rise from `start_lr` to `max_lr` over the first
/// `floor(pct_warm * total)` steps, then cosine decay reaching `final_lr` at
/// the last step.
pub fn one_cycle_lr(step: usize, total_steps: usize, cfg: &OneCycle) -> Result<f64> {
    if step >= total_steps {
        return Err(CbsaError::Contract(format!("step {step} outside 0..{total_steps}")));
    }
    let warm = (cfg.pct_warm * total_steps as f64 + 1e-9).floor() as usize;
    if step < warm {
        let t = step as f64 / warm as f64;
        return Ok(cfg.start_lr() + (cfg.max_lr - cfg.start_lr()) * t);
    }
    let span = total_steps - 1 - warm;
    if span == 0 {
        return Ok(cfg.max_lr);
    }
    let t = (step - warm) as f64 / span as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    Ok(cfg.final_lr() + (cfg.max_lr - cfg.final_lr()) * cos)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay over the trainable parameters of a store.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    ids: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let ids = store.trainable_ids();
        let zeros = |id: &ParamId| Tensor::zeros(store.get(*id).value.shape());
        Self {
            cfg,
            step: 0,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` must list the trainable parameters in
    /// store order, as returned by `Session::param_grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        if grads.len() != self.ids.len() || grads.iter().zip(&self.ids).any(|((a, _), b)| a != b) {
            return Err(CbsaError::Contract("gradients do not match the optimizer's parameters".into()));
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (slot, (id, g)) in grads.iter().enumerate() {
            let theta = store.value_mut(*id);
            if theta.shape() != g.shape() {
                return Err(CbsaError::dim(format!("gradient {:?} for parameter {:?}", g.shape(), theta.shape())));
            }
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            for (i, (p, &gi)) in theta.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                *p -= lr * (update + weight_decay * *p);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = OneCycle::default();
        let total = 100;
        assert!((one_cycle_lr(0, total, &cfg).unwrap() - 4e-5).abs() < 1e-18);
        assert_eq!(one_cycle_lr(30, total, &cfg).unwrap(), 1e-3);
        assert!((one_cycle_lr(99, total, &cfg).unwrap() - 1e-7).abs() < 1e-18);
        assert!(one_cycle_lr(100, total, &cfg).is_err());
        let lrs: Vec<f64> = (0..total).map(|s| one_cycle_lr(s, total, &cfg).unwrap()).collect();
        assert!(lrs[..31].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[30..].windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn zero_gradient_without_decay_changes_nothing() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.3, -1.7, 2.5]).unwrap(), true);
        let before = store.get(id).value.clone();
        let mut opt = AdamW::new(&store, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..5 {
            opt.step(&mut store, &[(id, Tensor::zeros(&[3]))], 1e-2).unwrap();
        }
        let after = &store.get(id).value;
        assert!(before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, 1.0]).unwrap(), true);
        let mut opt = AdamW::new(&store, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut store, &[(id, Tensor::vector(vec![2.0, -0.5]).unwrap())], 0.1).unwrap();
        let w = store.get(id).value.data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
    }
}
