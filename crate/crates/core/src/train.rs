//! The training protocol and its per-epoch diagnostics.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cat::{assign_pseudo_labels, compute_thresholds, coverage, estimate_priors, pseudo_label_cf1, CatThresholds};
use crate::context::{assign_context_labels, partition_labels, ContextPartition, CountMode};
use crate::error::{CbsaError, Result};
use crate::losses::{aux_loss, sup_alignment_loss, unsup_alignment_loss, total_loss, AslParams, LossReport};
use crate::metrics::{cf1, mean_average_precision};
use crate::model::{stack_rows, Ablation, Model, ModelConfig};
use crate::nn::Session;
use crate::optim::{one_cycle_lr, AdamW, AdamWConfig, OneCycle};
use crate::rng::{indexed_stream, substream, Rng};
use crate::synth::{augment, AugmentKind, SyntheticDataset};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub schedule: OneCycle,
    pub optimizer: AdamWConfig,
    pub asl: AslParams,
    /// Share of non-positive cells that receive a pseudo-negative.
    pub rho: f64,
    pub tau_context: f64,
    pub aux_weight: f64,
    pub n_contexts: usize,
    pub count_mode: CountMode,
    pub ablation: Ablation,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 8,
            total_epochs: 40,
            batch_size: 8,
            // A desk-sized run takes a few thousand steps, so the peak is
            // three times the schedule's reference value.
            schedule: OneCycle { max_lr: 3e-3, ..OneCycle::default() },
            optimizer: AdamWConfig::default(),
            asl: AslParams::default(),
            rho: 0.9,
            tau_context: 0.9,
            aux_weight: 1.0,
            n_contexts: 3,
            count_mode: CountMode::Containing,
            ablation: Ablation::Full,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(CbsaError::Spec(m.into()));
        if self.warmup_epochs >= self.total_epochs {
            return fail("warmup_epochs must be smaller than total_epochs");
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2");
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return fail("rho must lie in (0, 1]");
        }
        if !(self.tau_context >= 0.0 && self.tau_context < 1.0) {
            return fail("tau_context must lie in [0, 1)");
        }
        if !(self.schedule.max_lr > 0.0 && self.schedule.div_start > 0.0 && self.schedule.div_final > 0.0) {
            return fail("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.schedule.pct_warm) {
            return fail("pct_warm must lie in [0, 1)");
        }
        if self.threads == 0 {
            return fail("threads must be at least 1");
        }
        if self.ablation.uses_context() && self.n_contexts == 0 {
            return fail("n_contexts must be at least 1");
        }
        self.asl.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub loss_sup: f64,
    pub loss_unsup: f64,
    pub loss_aux: f64,
    pub map_val: f64,
    pub cf1_val: f64,
    pub pseudo_cf1: f64,
    pub pseudo_coverage: f64,
    pub context_acc_val: Option<f64>,
    pub tau_plus: Vec<f64>,
    pub tau_minus: Vec<f64>,
}

pub const CSV_HEADER: &str = "epoch,lr,loss_sup,loss_unsup,loss_aux,map_val,cf1_val,pseudo_cf1,pseudo_coverage";

impl EpochRecord {
    /// The fixed columns followed by `tau_plus_k` and `tau_minus_k` for each class.
    pub fn csv_header(n_classes: usize) -> String {
        let mut h = CSV_HEADER.to_string();
        for k in 0..n_classes {
            h.push_str(&format!(",tau_plus_{k}"));
        }
        for k in 0..n_classes {
            h.push_str(&format!(",tau_minus_{k}"));
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{},{:e},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.loss_sup,
            self.loss_unsup,
            self.loss_aux,
            self.map_val,
            self.cf1_val,
            self.pseudo_cf1,
            self.pseudo_coverage
        );
        for v in self.tau_plus.iter().chain(&self.tau_minus) {
            row.push_str(&format!(",{v}"));
        }
        row
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub map_val: f64,
    pub cf1_val: f64,
    pub context_acc_val: Option<f64>,
    pub pseudo_cf1_first_post_warmup: f64,
    pub pseudo_cf1_final: f64,
}

pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub partition: Option<ContextPartition>,
    pub final_metrics: FinalMetrics,
    pub model: Model,
}

/// Steps per epoch: `(warm-up, later)`.
pub fn steps_per_epoch(cfg: &TrainConfig, m: usize, n: usize) -> (usize, usize) {
    let warm = m.div_ceil(cfg.batch_size);
    let (b_l, b_u) = batch_split(cfg.batch_size, m, n);
    let later = if n == 0 { m.div_ceil(b_l) } else { n.div_ceil(b_u) };
    (warm, later)
}

/// Labeled and unlabeled slots of a mixed batch.
fn batch_split(batch: usize, m: usize, n: usize) -> (usize, usize) {
    let b_l = ((batch * m).div_ceil(m + n)).clamp(1, batch - 1);
    (b_l, batch - b_l)
}

struct Scores {
    g: Vec<Tensor>,
    p: Tensor,
}

fn score_views(model: &Model, views: &[Tensor], threads: usize) -> Result<Scores> {
    let out = model.evaluate(views, threads)?;
    let c = model.n_classes();
    let mut p = Tensor::zeros(&[views.len(), c]);
    let mut g = Vec::with_capacity(views.len());
    for (i, (gi, pi)) in out.into_iter().enumerate() {
        p.row_mut(i).copy_from_slice(&pi);
        g.push(gi);
    }
    Ok(Scores { g, p })
}

/// Clean-feature scores of the validation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub map_val: f64,
    pub cf1_val: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub context_acc_val: Option<f64>,
}

/// Scores the validation set without augmentation. Context accuracy is
/// measured against `partition` when the model has a context head.
pub fn evaluate(
    model: &Model,
    data: &SyntheticDataset,
    partition: Option<&ContextPartition>,
    threads: usize,
) -> Result<Evaluation> {
    let val_contexts = match partition {
        Some(p) => assign_context_labels(&data.y_val(), p)?,
        None => Vec::new(),
    };
    evaluate_with(model, data, &val_contexts, threads)
}

fn evaluate_with(model: &Model, data: &SyntheticDataset, val_contexts: &[Option<usize>], threads: usize) -> Result<Evaluation> {
    let views: Vec<Tensor> = data.val.iter().map(|i| i.features.clone()).collect();
    let scores = score_views(model, &views, threads)?;
    let y = data.y_val();
    let report = mean_average_precision(&scores.p, &y)?;
    let cf1 = cf1(&scores.p, &y, 0.5)?;
    let context_acc = match model.context_probs(&stack_rows(&scores.g)?)? {
        Some(q) => {
            let (mut hit, mut total) = (0usize, 0usize);
            for (j, c) in val_contexts.iter().enumerate() {
                if let Some(c) = c {
                    total += 1;
                    let row = q.row(j);
                    let arg = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                    hit += (arg == *c) as usize;
                }
            }
            Some(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
        }
        None => None,
    };
    Ok(Evaluation {
        map_val: report.map,
        cf1_val: cf1,
        per_class_ap: report.per_class,
        context_acc_val: context_acc,
    })
}

/// One labeled or unlabeled member of a training batch.
struct Member<'a> {
    features: &'a Tensor,
    background: &'a [f64],
}

struct BatchTargets {
    y_labeled: Option<Tensor>,
    context_labels: Vec<Option<usize>>,
    y_hat: Option<Tensor>,
    /// Weak-view context probabilities of the unlabeled members.
    q_a: Option<Tensor>,
}

/// Forward, backward and one optimizer step. Returns the loss components.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    labeled: &[Member],
    unlabeled: &[Member],
    targets: &BatchTargets,
    lr: f64,
    rng: &mut Rng,
    spec: &crate::synth::SyntheticSpec,
) -> Result<LossReport> {
    let grads;
    let report;
    {
        let mut s = Session::new(&model.store);
        let text = model.text_vars(&mut s)?;
        let mut forward = |members: &[Member], s: &mut Session| -> Result<(Vec<crate::tape::Var>, Vec<Tensor>)> {
            let mut rows = Vec::with_capacity(members.len());
            let mut gs = Vec::with_capacity(members.len());
            for m in members {
                let view = augment(m.features, AugmentKind::Strong, spec, m.background, rng);
                let (g, l) = model.pool_view(&view)?;
                rows.push(model.degrees(s, &text, &g, &l)?);
                gs.push(g);
            }
            Ok((rows, gs))
        };
        let (rows_l, g_l) = forward(labeled, &mut s)?;
        let (rows_u, g_u) = forward(unlabeled, &mut s)?;

        let zero = s.constant(Tensor::scalar(0.0));
        let sup = if rows_l.is_empty() {
            zero
        } else {
            let p_l = s.tape.concat_rows(&rows_l)?;
            sup_alignment_loss(&mut s, p_l, targets.y_labeled.as_ref().expect("labeled targets"), &cfg.asl)?
        };
        let unsup = match (&targets.y_hat, rows_u.is_empty()) {
            (Some(y_hat), false) => {
                let p_u = s.tape.concat_rows(&rows_u)?;
                unsup_alignment_loss(&mut s, p_u, y_hat, &cfg.asl)?
            }
            _ => zero,
        };
        let aux = match &model.head {
            Some(head) => {
                let labeled_part = if g_l.is_empty() {
                    None
                } else {
                    let g = s.constant(stack_rows(&g_l)?);
                    Some((head.forward(&mut s, g)?, targets.context_labels.as_slice()))
                };
                let unlabeled_part = match (&targets.q_a, g_u.is_empty()) {
                    (Some(q_a), false) => {
                        let g = s.constant(stack_rows(&g_u)?);
                        Some((head.forward(&mut s, g)?, q_a))
                    }
                    _ => None,
                };
                aux_loss(&mut s, labeled_part, unlabeled_part, cfg.tau_context)?
            }
            None => zero,
        };
        let weighted_aux = s.tape.scale(aux, cfg.aux_weight);
        let partial = s.tape.add(sup, unsup)?;
        let total = s.tape.add(partial, weighted_aux)?;
        report = total_loss(s.value(sup).item(), s.value(unsup).item(), cfg.aux_weight * s.value(aux).item());
        if !report.total.is_finite() {
            return Err(CbsaError::Numeric(format!(
                "loss components sup={} unsup={} aux={}",
                report.sup, report.unsup, report.aux
            )));
        }
        grads = s.param_grads(total)?;
    }
    opt.step(&mut model.store, &grads, lr)?;
    for (id, _) in &grads {
        let p = model.store.get(*id);
        if !p.value.data().iter().all(|v| v.is_finite()) {
            return Err(CbsaError::Numeric(format!("{} left the finite range after the update", p.name)));
        }
    }
    Ok(report)
}

/// Numeric failures inside a run, including NaN rows from overflowed
/// weights, are reported as a diverged loss.
fn diverged(e: CbsaError, epoch: usize, step: usize) -> CbsaError {
    match e {
        CbsaError::Numeric(detail) => CbsaError::NonFiniteLoss { epoch, step, detail },
        CbsaError::DegenerateRow { row, norm, .. } if !norm.is_finite() => CbsaError::NonFiniteLoss {
            epoch,
            step,
            detail: format!("row {row} has norm {norm}"),
        },
        other => other,
    }
}

/// Trains a fresh model on `data` and reports one record per epoch to
/// `on_epoch` as soon as it is complete.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &SyntheticDataset,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let y_l = data.y_labeled();
    let (m, n) = (data.labeled.len(), data.unlabeled.len());
    if m == 0 {
        return Err(CbsaError::EmptyLabeled);
    }
    let partition = if cfg.ablation.uses_context() {
        if cfg.n_contexts > data.spec.n_classes {
            return Err(CbsaError::Spec(format!("K={} exceeds C={}", cfg.n_contexts, data.spec.n_classes)));
        }
        Some(partition_labels(&y_l, cfg.n_contexts, cfg.count_mode, &mut substream(seed, "kmeans"))?)
    } else {
        None
    };
    let context_l = match &partition {
        Some(p) => assign_context_labels(&y_l, p)?,
        None => vec![None; m],
    };
    let val_contexts = match &partition {
        Some(p) => assign_context_labels(&data.y_val(), p)?,
        None => Vec::new(),
    };

    let mut model = Model::new(*model_cfg, data.world.dictionary.clone(), cfg.ablation, cfg.n_contexts, seed)?;
    let mut opt = AdamW::new(&model.store, cfg.optimizer);
    let priors = estimate_priors(&y_l)?;
    let y_u_truth = data.y_unlabeled_truth();

    let (warm_steps, later_steps) = steps_per_epoch(cfg, m, n);
    let total_steps = cfg.warmup_epochs * warm_steps + (cfg.total_epochs - cfg.warmup_epochs) * later_steps;
    let (b_l, b_u) = batch_split(cfg.batch_size, m, n);
    let mut rng = substream(seed, "train");
    let mut step = 0usize;
    let mut records = Vec::with_capacity(cfg.total_epochs);
    let mut labeled_order: Vec<usize> = Vec::new();
    let mut labeled_cursor = 0usize;

    let member = |i: usize| Member {
        features: &data.train[i].features,
        background: data.background(&data.train[i]),
    };

    for epoch in 1..=cfg.total_epochs {
        let warm = epoch <= cfg.warmup_epochs;

        // Weak-view scores of the unlabeled pool: thresholds, pseudo-labels
        // and context targets for this epoch.
        let mut weak_rng = indexed_stream(seed, "weak", epoch as u64);
        let weak_views: Vec<Tensor> = data
            .unlabeled
            .iter()
            .map(|&i| {
                let inst = &data.train[i];
                augment(&inst.features, AugmentKind::Weak, &data.spec, data.background(inst), &mut weak_rng)
            })
            .collect();
        let (thresholds, y_hat, q_a_all) = if n > 0 {
            let weak = score_views(&model, &weak_views, cfg.threads).map_err(|e| diverged(e, epoch, step))?;
            let th = compute_thresholds(&weak.p, &priors, cfg.rho)?;
            let y_hat = assign_pseudo_labels(&weak.p, &th)?;
            let q_a = model.context_probs(&stack_rows(&weak.g)?)?;
            (th, Some(y_hat), q_a)
        } else {
            let c = data.spec.n_classes;
            (CatThresholds { tau_plus: vec![0.0; c], tau_minus: vec![0.0; c], rho: cfg.rho }, None, None)
        };
        let (pseudo_cf1, pseudo_coverage) = match &y_hat {
            Some(y) => (pseudo_label_cf1(y, &y_u_truth)?, coverage(y)),
            None => (0.0, 0.0),
        };

        let mut sums = LossReport::default();
        let mut n_steps = 0usize;
        let mut lr = 0.0;
        let mut run_batch = |labeled_idx: &[usize], unlabeled_pos: &[usize], model: &mut Model, rng: &mut Rng, step: &mut usize| -> Result<()> {
            lr = one_cycle_lr(*step, total_steps, &cfg.schedule)?;
            let labeled: Vec<Member> = labeled_idx.iter().map(|&r| member(data.labeled[r])).collect();
            let unlabeled: Vec<Member> = unlabeled_pos.iter().map(|&u| member(data.unlabeled[u])).collect();
            let targets = BatchTargets {
                y_labeled: Some(SyntheticDataset::labels_of(&data.train, &labeled_idx.iter().map(|&r| data.labeled[r]).collect::<Vec<_>>())),
                context_labels: labeled_idx.iter().map(|&r| context_l[r]).collect(),
                y_hat: y_hat.as_ref().map(|y| gather_rows(y, unlabeled_pos)),
                q_a: q_a_all.as_ref().map(|q| gather_rows(q, unlabeled_pos)),
            };
            let report = train_step(model, &mut opt, cfg, &labeled, &unlabeled, &targets, lr, rng, &data.spec)
                .map_err(|e| diverged(e, epoch, *step))?;
            sums.sup += report.sup;
            sums.unsup += report.unsup;
            sums.aux += report.aux;
            n_steps += 1;
            *step += 1;
            Ok(())
        };

        if warm {
            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                run_batch(chunk, &[], &mut model, &mut rng, &mut step)?;
            }
        } else {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let chunks: Vec<Vec<usize>> = if n == 0 {
                vec![Vec::new(); later_steps]
            } else {
                order.chunks(b_u).map(<[usize]>::to_vec).collect()
            };
            for chunk in chunks {
                let mut picks = Vec::with_capacity(b_l);
                while picks.len() < b_l {
                    if labeled_cursor == labeled_order.len() {
                        labeled_order = (0..m).collect();
                        labeled_order.shuffle(&mut rng);
                        labeled_cursor = 0;
                    }
                    picks.push(labeled_order[labeled_cursor]);
                    labeled_cursor += 1;
                }
                run_batch(&picks, &chunk, &mut model, &mut rng, &mut step)?;
            }
        }

        let val = evaluate_with(&model, data, &val_contexts, cfg.threads).map_err(|e| diverged(e, epoch, step))?;
        let k = n_steps.max(1) as f64;
        let record = EpochRecord {
            epoch,
            lr,
            loss_sup: sums.sup / k,
            loss_unsup: sums.unsup / k,
            loss_aux: sums.aux / k,
            map_val: val.map_val,
            cf1_val: val.cf1_val,
            pseudo_cf1,
            pseudo_coverage,
            context_acc_val: val.context_acc_val,
            tau_plus: thresholds.tau_plus,
            tau_minus: thresholds.tau_minus,
        };
        on_epoch(&record)?;
        records.push(record);
    }

    let last = records.last().expect("at least one epoch");
    let final_metrics = FinalMetrics {
        map_val: last.map_val,
        cf1_val: last.cf1_val,
        context_acc_val: last.context_acc_val,
        pseudo_cf1_first_post_warmup: records[cfg.warmup_epochs].pseudo_cf1,
        pseudo_cf1_final: last.pseudo_cf1,
    };
    Ok(TrainOutcome {
        records,
        partition,
        final_metrics,
        model,
    })
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let c = t.cols();
    let mut out = Tensor::zeros(&[rows.len(), c]);
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).copy_from_slice(t.row(i));
    }
    out
}
