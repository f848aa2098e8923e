//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criteria 5 to 8 drive the `cbsa` binary on the default dataset.

// Shared with the core test suite, which also uses the helpers not called here.
#[allow(dead_code)]
#[path = "../../../core/tests/support/mod.rs"]
mod support;

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use cbsa_cli::commands::{AblationReport, MultiSeedReport};
use cbsa_core::cat::{assign_pseudo_labels, compute_thresholds, estimate_priors, pseudo_label_cf1, ClassPriors};
use cbsa_core::cbsf::{decode, encode, FeatureFile, FeatureHeader, FeatureRecord};
use cbsa_core::context::ContextPartition;
use cbsa_core::losses::{asl, AslParams};
use cbsa_core::model::Ablation;
use cbsa_core::rng::{substream, Rng};
use cbsa_core::synth::Manifest;
use cbsa_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;
use support::{gradients, spectral};

type Check = Result<String, String>;

fn cbsa(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cbsa"));
    cmd.current_dir(dir).args(args).env("CBSA_TRAIN__THREADS", "1");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().map_err(|e| format!("cannot launch cbsa: {e}"))?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "cbsa {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("")
        ))
    }
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn gradient_oracle() -> Check {
    let graphs = gradients::composite_graphs(7, 100)?;
    let chain = gradients::prompt_to_asl_chain()?;
    Ok(format!("{graphs} entries over 100 graphs, {chain} through the full chain"))
}

fn spectral_oracle() -> Check {
    let worst = spectral::connected_graphs(2024, 50)?;
    spectral::planted_blocks(11, 50, 2..=2)?;
    Ok(format!("worst cut ratio {worst:.4}, 50 two-block graphs exact"))
}

/// Distinct scores: a shuffled grid plus jitter smaller than its spacing.
fn distinct_scores(rng: &mut Rng, n: usize, c: usize) -> Tensor {
    let mut q = Tensor::zeros(&[n, c]);
    for k in 0..c {
        let mut ranks: Vec<usize> = (0..n).collect();
        ranks.shuffle(rng);
        for (j, &r) in ranks.iter().enumerate() {
            q.set(j, k, (r as f64 + rng.random_range(0.0..0.5)) / n as f64);
        }
    }
    q
}

fn cat_exactness() -> Check {
    let mut rng = substream(31, "cat-acceptance");
    let mut violations = Vec::new();
    for trial in 0..1000 {
        let n = rng.random_range(1..=80);
        let c = rng.random_range(1..=6);
        let m = rng.random_range(1..=40usize);
        // Priors i/m and rho r/20 keep the expected counts in exact integer arithmetic.
        let hits: Vec<usize> = (0..c).map(|_| rng.random_range(0..=m)).collect();
        let priors = ClassPriors(hits.iter().map(|&i| i as f64 / m as f64).collect());
        let r20 = rng.random_range(1..=20usize);
        let q = distinct_scores(&mut rng, n, c);
        let th = compute_thresholds(&q, &priors, r20 as f64 / 20.0).map_err(|e| e.to_string())?;
        let y = assign_pseudo_labels(&q, &th).map_err(|e| e.to_string())?;
        for (k, &i) in hits.iter().enumerate() {
            let a = (i * n).div_ceil(m);
            let zeros = r20 * (n - a) / 20;
            let pos = (0..n).filter(|&j| y.at(j, k) == 1.0).count();
            let neg = (0..n).filter(|&j| y.at(j, k) == 0.0).count();
            if (pos, neg) != (a, zeros) {
                violations.push(format!("trial {trial} class {k}: ({pos}, {neg}) vs ({a}, {zeros})"));
            }
        }
    }
    if let Some(first) = violations.first() {
        return Err(format!("{} violations, first {first}", violations.len()));
    }

    let mut worst: f64 = 1.0;
    for _ in 0..100 {
        let (n, c) = (rng.random_range(2..=60), rng.random_range(1..=6));
        let mut truth = Tensor::zeros(&[n, c]);
        let mut q = Tensor::zeros(&[n, c]);
        for k in 0..c {
            let a = rng.random_range(1..n);
            let mut rows: Vec<usize> = (0..n).collect();
            rows.shuffle(&mut rng);
            for (rank, &j) in rows.iter().enumerate() {
                let positive = rank < a;
                truth.set(j, k, if positive { 1.0 } else { 0.0 });
                q.set(j, k, if positive { rng.random_range(0.6..1.0) } else { rng.random_range(0.0..0.4) });
            }
        }
        let priors = estimate_priors(&truth).map_err(|e| e.to_string())?;
        let th = compute_thresholds(&q, &priors, 1.0).map_err(|e| e.to_string())?;
        let y = assign_pseudo_labels(&q, &th).map_err(|e| e.to_string())?;
        worst = worst.min(pseudo_label_cf1(&y, &truth).map_err(|e| e.to_string())?);
    }
    if worst != 1.0 {
        return Err(format!("separable scores gave pseudo-label CF1 {worst}"));
    }
    Ok("1000 matrices without violations, separable CF1 = 1".into())
}

fn asl_identity() -> Check {
    let plain = AslParams { gamma_pos: 0.0, gamma_neg: 0.0 };
    let mut worst: f64 = 0.0;
    for i in 1..=99 {
        let p = i as f64 / 100.0;
        worst = worst.max((asl(p, true, &plain) + p.ln()).abs());
        worst = worst.max((asl(p, false, &plain) + (1.0 - p).ln()).abs());
    }
    if worst >= 1e-12 {
        return Err(format!("BCE mismatch {worst:e}"));
    }
    let worked = asl(0.5, false, &AslParams { gamma_pos: 0.0, gamma_neg: 2.0 });
    let err = (worked - 0.25 * std::f64::consts::LN_2).abs();
    if err >= 1e-12 {
        return Err(format!("L-(0.5) = {worked}, off by {err:e}"));
    }
    Ok(format!("BCE within {worst:.1e}, worked value within {err:.1e}"))
}

fn ablation_direction(report: &AblationReport, elapsed: Duration) -> Check {
    let map = |ab| 100.0 * report.summary_of(ab).map_val.mean;
    let (tp, saa, full) = (map(Ablation::Tp), map(Ablation::TpSaa), map(Ablation::Full));
    let line = format!(
        "mAP full {full:.2} / tp+saa {saa:.2} / tp {tp:.2}, gap {:.2}, {} runs in {:.0} s",
        full - tp,
        report.runs.len(),
        elapsed.as_secs_f64()
    );
    if !(full >= saa && saa >= tp && full - tp >= 2.0) {
        return Err(line);
    }
    if elapsed > Duration::from_secs(300) {
        return Err(format!("{line}, over the 300 s budget"));
    }
    Ok(line)
}

fn pseudo_label_trend(report: &AblationReport) -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for r in report.runs.iter().filter(|r| r.ablation == Ablation::Full) {
        let (first, last) = (r.metrics.pseudo_cf1_first_post_warmup, r.metrics.pseudo_cf1_final);
        ok &= last > first;
        parts.push(format!("seed {}: {first:.3} -> {last:.3}", r.seed));
    }
    if parts.is_empty() {
        return Err("no full-method runs".into());
    }
    let line = parts.join(", ");
    if ok {
        Ok(line)
    } else {
        Err(line)
    }
}

fn sorted_groups(groups: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    let mut g: Vec<Vec<usize>> = groups.into_iter().filter(|g| !g.is_empty()).collect();
    g.sort();
    g
}

fn context_recovery(dir: &Path, report: &AblationReport) -> Check {
    let out = dir.join("partition-out");
    cbsa(dir, &["partition", "--out", out.to_str().unwrap()], &[])?;
    let part: ContextPartition = read_json(&out.join("partition.json"))?;
    let manifest: Manifest = read_json(&dir.join("data/manifest.json"))?;
    let planted = sorted_groups(manifest.spec.blocks());
    if sorted_groups(part.groups()) != planted {
        return Err(format!("recovered {:?}, planted {planted:?}", part.groups()));
    }
    let floor = 1.0 / manifest.spec.k_true as f64 + 0.30;
    let accs: Vec<f64> = report
        .runs
        .iter()
        .filter(|r| r.ablation == Ablation::Full)
        .filter_map(|r| r.metrics.context_acc_val)
        .collect();
    if accs.is_empty() || accs.iter().any(|&a| a <= floor) {
        return Err(format!("blocks recovered, context accuracy {accs:?} vs floor {floor:.3}"));
    }
    Ok(format!("blocks recovered, context accuracy {accs:?} > {floor:.3}"))
}

fn determinism(dir: &Path) -> Check {
    let csv = |name: &str| -> Result<Vec<u8>, String> {
        cbsa(dir, &["train", "--seed", "1", "--threads", "1", "--out", name], &[])?;
        std::fs::read(dir.join(name).join("metrics.csv")).map_err(|e| e.to_string())
    };
    let (a, b) = (csv("det-a")?, csv("det-b")?);
    if a != b {
        return Err("metrics.csv differs between identical runs".into());
    }
    // The summary format does not depend on run length.
    let short = [("CBSA_TRAIN__TOTAL_EPOCHS", "4"), ("CBSA_TRAIN__WARMUP_EPOCHS", "2")];
    cbsa(dir, &["train", "--seeds", "1,2,3", "--out", "multi"], &short)?;
    let report: MultiSeedReport = read_json(&dir.join("multi/final.json"))?;
    let m = report.summary.map_val;
    if report.seeds != [1, 2, 3] || m.n != 3 || !m.stderr.is_finite() {
        return Err(format!("bad multi-seed summary {m:?}"));
    }
    Ok(format!(
        "{} bytes identical, 3-seed mAP {:.2} ± {:.2}",
        a.len(),
        100.0 * m.mean,
        100.0 * m.stderr
    ))
}

fn cbsf_round_trip() -> Check {
    let mut rng = substream(77, "cbsf-acceptance");
    let mut unlabeled = 0;
    for trial in 0..500 {
        let (c, h, w, d) = (rng.random_range(1..6), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..6));
        let count = rng.random_range(0..6);
        let has_labels = rng.random::<bool>();
        unlabeled += usize::from(!has_labels);
        let records = (0..count)
            .map(|_| {
                let data = (0..h * w * d)
                    .map(|_| {
                        let x = f32::from_bits(rng.random::<u32>());
                        if x.is_finite() { x as f64 } else { -0.0 }
                    })
                    .collect();
                FeatureRecord {
                    features: Tensor::matrix(h * w, d, data).unwrap(),
                    labels: has_labels.then(|| (0..c).map(|_| rng.random_range(0..2u8)).collect()),
                }
            })
            .collect();
        let file = FeatureFile {
            header: FeatureHeader { count, n_classes: c, height: h, width: w, d, has_labels },
            records,
        };
        let bytes = encode(&file).map_err(|e| e.to_string())?;
        let back = decode(&bytes).map_err(|e| e.to_string())?;
        let bits = |f: &FeatureFile| -> Vec<u64> { f.records.iter().flat_map(|r| r.features.data().iter().map(|v| v.to_bits())).collect() };
        let labels = |f: &FeatureFile| -> Vec<Option<Vec<u8>>> { f.records.iter().map(|r| r.labels.clone()).collect() };
        if back.header != file.header || bits(&back) != bits(&file) || labels(&back) != labels(&file) {
            return Err(format!("trial {trial} did not round-trip"));
        }
        if encode(&back).map_err(|e| e.to_string())? != bytes {
            return Err(format!("trial {trial} re-encodes differently"));
        }
    }
    Ok(format!("500 files bit-exact, {unlabeled} without labels"))
}

struct Runner {
    failed: usize,
}

impl Runner {
    fn report(&mut self, id: u8, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Check) {
        let start = Instant::now();
        let mut result = f();
        let took = start.elapsed();
        if let (Ok(detail), Some(b)) = (&result, budget) {
            if took > b {
                result = Err(format!("{detail}; over the {} s budget", b.as_secs()));
            }
        }
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                self.failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {id} {name} ({:.1} s): {detail}", took.as_secs_f64());
    }
}

fn main() -> ExitCode {
    let mut run = Runner { failed: 0 };
    run.report(1, "gradient oracle", Some(Duration::from_secs(60)), gradient_oracle);
    run.report(2, "spectral oracle", Some(Duration::from_secs(30)), spectral_oracle);
    run.report(3, "CAT exactness", None, cat_exactness);
    run.report(4, "ASL/BCE identity", None, asl_identity);

    let tmp = tempfile::tempdir().expect("temporary directory");
    let dir: PathBuf = tmp.path().to_path_buf();
    let ablation = cbsa(&dir, &["gen-data"], &[]).and_then(|()| {
        let start = Instant::now();
        cbsa(&dir, &["ablate", "--seeds", "1,2,3", "--threads", "1"], &[])?;
        Ok((read_json::<AblationReport>(&dir.join("out/ablation.json"))?, start.elapsed()))
    });
    let with_report = |f: &dyn Fn(&AblationReport, Duration) -> Check| match &ablation {
        Ok((r, t)) => f(r, *t),
        Err(e) => Err(format!("ablation run failed: {e}")),
    };
    run.report(5, "desk-scale ablation direction", None, || with_report(&ablation_direction));
    run.report(6, "pseudo-label quality trend", None, || with_report(&|r, _| pseudo_label_trend(r)));
    run.report(7, "context recovery", None, || with_report(&|r, _| context_recovery(&dir, r)));
    run.report(8, "determinism", None, || determinism(&dir));
    run.report(9, "CBSF format fidelity", None, cbsf_round_trip);

    println!("{} of 9 criteria failed", run.failed);
    if run.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
