//! Three interactive views for the browser page in `www/`. Each view is a
//! plain function returning a serializable struct; the `wasm_bindgen`
//! wrappers at the bottom hand it to JavaScript as JSON.

use cbsa_core::cat::{assign_pseudo_labels, compute_thresholds, coverage, estimate_priors, pseudo_label_cf1, IGNORED};
use cbsa_core::context::{affinity, build_cooccurrence, normalized_cut, partition_labels, CountMode};
use cbsa_core::losses::{asl, AslParams};
use cbsa_core::optim::{one_cycle_lr, OneCycle};
use cbsa_core::rng::{gaussian, substream};
use cbsa_core::synth::{SyntheticDataset, SyntheticSpec};
use cbsa_core::Tensor;
use rand::Rng as _;
use serde::Serialize;
use wasm_bindgen::prelude::*;

type Result<T> = std::result::Result<T, String>;

fn core<T>(r: cbsa_core::error::Result<T>) -> Result<T> {
    r.map_err(|e| e.to_string())
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

#[derive(Debug, Serialize)]
pub struct PartitionView {
    pub n_labeled: usize,
    pub k: usize,
    pub assignment: Vec<usize>,
    pub planted: Vec<usize>,
    pub eigenvalues: Vec<f64>,
    pub affinity: Vec<Vec<f64>>,
    pub ncut: f64,
    pub ncut_planted: f64,
    pub matches_planted: bool,
}

/// Draws a labeled set from the default synthetic world and partitions its
/// label co-occurrence graph into `k` contexts.
pub fn partition_view(seed: u64, n_total: usize, labeled_fraction: f64, leak: f64, k: usize) -> Result<PartitionView> {
    let spec = SyntheticSpec { cross_context_leak: leak, ..SyntheticSpec::default() };
    let data = core(SyntheticDataset::generate(&spec, seed, n_total, 1, labeled_fraction))?;
    let y = data.y_labeled();
    if k == 0 || k > spec.n_classes {
        return Err(format!("K must lie in 1..={}", spec.n_classes));
    }
    let part = core(partition_labels(&y, k, CountMode::Containing, &mut substream(seed, "kmeans")))?;
    let p = core(affinity(&core(build_cooccurrence(&y, CountMode::Containing))?.s))?;
    let mut planted = vec![0; spec.n_classes];
    for (b, labels) in spec.blocks().iter().enumerate() {
        for &l in labels {
            planted[l] = b;
        }
    }
    let same = |a: &[usize], b: &[usize]| (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])));
    Ok(PartitionView {
        n_labeled: y.rows(),
        k,
        matches_planted: same(&part.assignment, &planted),
        ncut: normalized_cut(&p, &part.assignment),
        ncut_planted: normalized_cut(&p, &planted),
        assignment: part.assignment,
        planted,
        eigenvalues: part.eigenvalues,
        affinity: rows(&p),
    })
}

#[derive(Debug, Serialize)]
pub struct ClassBand {
    pub prior: f64,
    pub tau_plus: f64,
    pub tau_minus: f64,
    /// `(score, truly positive, pseudo-label)` for every unlabeled instance.
    pub cells: Vec<(f64, bool, f64)>,
    pub positives: usize,
    pub negatives: usize,
    pub ignored: usize,
}

#[derive(Debug, Serialize)]
pub struct ThresholdView {
    pub classes: Vec<ClassBand>,
    pub cf1: f64,
    pub coverage: f64,
}

/// Scores `sigmoid(separation * (2y - 1) + noise)` for `n` instances and
/// `c` classes, thresholded with priors from a labeled sample of size `m`.
pub fn threshold_view(seed: u64, n: usize, m: usize, c: usize, separation: f64, rho: f64) -> Result<ThresholdView> {
    if n == 0 || m == 0 || c == 0 {
        return Err("n, m and c must be positive".into());
    }
    let mut rng = substream(seed, "threshold-view");
    let rates: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..0.5)).collect();
    let draw = |rows: usize, rng: &mut cbsa_core::rng::Rng| {
        let mut y = Tensor::zeros(&[rows, c]);
        for i in 0..rows {
            for (k, &r) in rates.iter().enumerate() {
                y.set(i, k, f64::from(u8::from(rng.random::<f64>() < r)));
            }
        }
        y
    };
    let y_l = draw(m, &mut rng);
    let truth = draw(n, &mut rng);
    let mut q = Tensor::zeros(&[n, c]);
    for i in 0..n {
        for k in 0..c {
            let z = separation * (2.0 * truth.at(i, k) - 1.0) + gaussian(&mut rng, 1.0);
            q.set(i, k, 1.0 / (1.0 + (-z).exp()));
        }
    }
    let priors = core(estimate_priors(&y_l))?;
    let th = core(compute_thresholds(&q, &priors, rho))?;
    let y_hat = core(assign_pseudo_labels(&q, &th))?;
    let classes = (0..c)
        .map(|k| {
            let cells: Vec<(f64, bool, f64)> = (0..n).map(|i| (q.at(i, k), truth.at(i, k) == 1.0, y_hat.at(i, k))).collect();
            let count = |v: f64| cells.iter().filter(|cell| cell.2 == v).count();
            ClassBand {
                prior: priors.0[k],
                tau_plus: th.tau_plus[k],
                tau_minus: th.tau_minus[k],
                positives: count(1.0),
                negatives: count(0.0),
                ignored: count(IGNORED),
                cells,
            }
        })
        .collect();
    Ok(ThresholdView {
        classes,
        cf1: core(pseudo_label_cf1(&y_hat, &truth))?,
        coverage: coverage(&y_hat),
    })
}

#[derive(Debug, Serialize)]
pub struct CurveView {
    pub lr: Vec<f64>,
    pub p: Vec<f64>,
    pub asl_pos: Vec<f64>,
    pub asl_neg: Vec<f64>,
    pub bce_pos: Vec<f64>,
    pub bce_neg: Vec<f64>,
}

/// The one-cycle learning rate over `total_steps` and ASL against BCE on a
/// probability grid.
pub fn curve_view(schedule: OneCycle, total_steps: usize, gamma_pos: f64, gamma_neg: f64) -> Result<CurveView> {
    let params = AslParams { gamma_pos, gamma_neg };
    core(params.validate())?;
    let lr = (0..total_steps)
        .map(|s| core(one_cycle_lr(s, total_steps, &schedule)))
        .collect::<Result<Vec<_>>>()?;
    let p: Vec<f64> = (1..200).map(|i| i as f64 / 200.0).collect();
    let bce = AslParams { gamma_pos: 0.0, gamma_neg: 0.0 };
    let curve = |y: bool, a: &AslParams| p.iter().map(|&v| asl(v, y, a)).collect::<Vec<_>>();
    Ok(CurveView {
        lr,
        asl_pos: curve(true, &params),
        asl_neg: curve(false, &params),
        bce_pos: curve(true, &bce),
        bce_neg: curve(false, &bce),
        p,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = partitionView)]
pub fn partition_view_js(seed: u32, n_total: usize, labeled_fraction: f64, leak: f64, k: usize) -> std::result::Result<String, JsError> {
    to_js(partition_view(seed.into(), n_total, labeled_fraction, leak, k))
}

#[wasm_bindgen(js_name = thresholdView)]
pub fn threshold_view_js(seed: u32, n: usize, m: usize, c: usize, separation: f64, rho: f64) -> std::result::Result<String, JsError> {
    to_js(threshold_view(seed.into(), n, m, c, separation, rho))
}

#[wasm_bindgen(js_name = curveView)]
#[allow(clippy::too_many_arguments)]
pub fn curve_view_js(
    max_lr: f64,
    pct_warm: f64,
    div_start: f64,
    div_final: f64,
    total_steps: usize,
    gamma_pos: f64,
    gamma_neg: f64,
) -> std::result::Result<String, JsError> {
    let schedule = OneCycle { max_lr, pct_warm, div_start, div_final };
    to_js(curve_view(schedule, total_steps, gamma_pos, gamma_neg))
}
