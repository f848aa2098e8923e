//! The subcommands. Each reads a resolved [`RunConfig`] and writes its
//! outputs under `paths.data_dir` or `paths.out_dir`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cbsa_core::cbsf::{ingest_features, write_features};
use cbsa_core::context::{partition_labels, ContextPartition};
use cbsa_core::model::{Ablation, Model, ModelConfig};
use cbsa_core::rng::substream;
use cbsa_core::synth::{Manifest, SyntheticDataset};
use cbsa_core::tensor::Tensor;
use cbsa_core::train::{self, EpochRecord, Evaluation, FinalMetrics};
use cbsa_core::CbsaError;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::summary::MeanStderr;
use crate::{CliError, Result};

pub const TRAIN_FILE: &str = "train.cbsf";
pub const VAL_FILE: &str = "val.cbsf";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_FILE: &str = "final.json";
pub const PARTITION_FILE: &str = "partition.json";
pub const MODEL_FILE: &str = "model.json";
pub const EVAL_FILE: &str = "eval.json";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_CSV: &str = "ablation.csv";

/// Attaches `path` to I/O failures coming out of the core crate.
fn at<T>(path: &Path, r: cbsa_core::Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        CbsaError::Io(source) => CliError::io(path, source),
        other => CliError::Core(other),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Core(e.into()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Core(e.into()))
}

#[derive(Clone, Debug, Serialize)]
pub struct GenReport {
    pub train: PathBuf,
    pub val: PathBuf,
    pub manifest: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    pub n_labeled: usize,
}

pub fn gen_data(cfg: &RunConfig) -> Result<GenReport> {
    let d = &cfg.data;
    if d.n_total == 0 || d.n_val == 0 {
        return Err(CbsaError::Spec("n_total and n_val must be positive".into()).into());
    }
    let data = SyntheticDataset::generate(&d.spec, cfg.seed, d.n_total, d.n_val, d.labeled_fraction)?;
    let dir = &cfg.paths.data_dir;
    create_dir(dir)?;
    let (train_file, val_file) = data.to_feature_files();
    let report = GenReport {
        train: dir.join(TRAIN_FILE),
        val: dir.join(VAL_FILE),
        manifest: dir.join(MANIFEST_FILE),
        n_train: data.train.len(),
        n_val: data.val.len(),
        n_labeled: data.labeled.len(),
    };
    at(&report.train, write_features(&report.train, &train_file))?;
    at(&report.val, write_features(&report.val, &val_file))?;
    write_json(&report.manifest, &data.manifest())?;
    Ok(report)
}

/// Reads the dataset written by [`gen_data`].
pub fn load_data(cfg: &RunConfig) -> Result<SyntheticDataset> {
    let dir = &cfg.paths.data_dir;
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let train_path = dir.join(TRAIN_FILE);
    let val_path = dir.join(VAL_FILE);
    let train_file = at(&train_path, ingest_features(&train_path))?;
    let val_file = at(&val_path, ingest_features(&val_path))?;
    Ok(SyntheticDataset::from_parts(&manifest, &train_file, &val_file)?)
}

pub fn partition(cfg: &RunConfig) -> Result<ContextPartition> {
    let data = load_data(cfg)?;
    let k = cfg.train.n_contexts;
    let c = data.spec.n_classes;
    if k == 0 || k > c {
        return Err(CbsaError::Spec(format!("K={k} must lie in 1..={c}")).into());
    }
    let part = partition_labels(&data.y_labeled(), k, cfg.train.count_mode, &mut substream(cfg.seed, "kmeans"))?;
    create_dir(&cfg.paths.out_dir)?;
    write_json(&cfg.paths.out_dir.join(PARTITION_FILE), &part)?;
    Ok(part)
}

/// Trainable parameters of a finished run plus what is needed to rebuild the
/// frozen parts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub ablation: Ablation,
    pub n_contexts: usize,
    pub model: ModelConfig,
    pub partition: Option<ContextPartition>,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    fn capture(model: &Model, seed: u64, n_contexts: usize, partition: Option<ContextPartition>) -> Self {
        let params = model
            .store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let p = model.store.get(id);
                (p.name.clone(), p.value.clone())
            })
            .collect();
        Self {
            seed,
            ablation: model.ablation,
            n_contexts,
            model: model.cfg,
            partition,
            params,
        }
    }

    fn restore(&self, data: &SyntheticDataset) -> Result<Model> {
        let mut model = Model::new(self.model, data.world.dictionary.clone(), self.ablation, self.n_contexts, self.seed)?;
        let trainable = model.store.trainable_ids();
        if trainable.len() != self.params.len() {
            return Err(CliError::Config(format!(
                "checkpoint holds {} parameters, the model has {}",
                self.params.len(),
                trainable.len()
            )));
        }
        for id in trainable {
            let name = model.store.get(id).name.clone();
            let value = self
                .params
                .get(&name)
                .ok_or_else(|| CliError::Config(format!("checkpoint lacks parameter {name}")))?;
            let slot = model.store.value_mut(id);
            if slot.shape() != value.shape() {
                return Err(CliError::Config(format!("parameter {name} has shape {:?}", value.shape())));
            }
            *slot = value.clone();
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub ablation: Ablation,
    pub metrics: FinalMetrics,
}

#[derive(Clone, Debug, Serialize)]
struct FinalReport<'a> {
    seed: u64,
    ablation: Ablation,
    metrics: &'a FinalMetrics,
    config: &'a RunConfig,
}

/// Mean and standard error of each final metric across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub map_val: MeanStderr,
    pub cf1_val: MeanStderr,
    pub context_acc_val: Option<MeanStderr>,
    pub pseudo_cf1_first_post_warmup: MeanStderr,
    pub pseudo_cf1_final: MeanStderr,
}

impl MetricSummary {
    pub fn of(runs: &[RunResult]) -> Option<Self> {
        let pick = |f: fn(&FinalMetrics) -> f64| MeanStderr::of(&runs.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
        let ctx: Option<Vec<f64>> = runs.iter().map(|r| r.metrics.context_acc_val).collect();
        Some(Self {
            map_val: pick(|m| m.map_val)?,
            cf1_val: pick(|m| m.cf1_val)?,
            context_acc_val: ctx.and_then(|v| MeanStderr::of(&v)),
            pseudo_cf1_first_post_warmup: pick(|m| m.pseudo_cf1_first_post_warmup)?,
            pseudo_cf1_final: pick(|m| m.pseudo_cf1_final)?,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub seeds: Vec<u64>,
    pub ablation: Ablation,
    pub runs: Vec<RunResult>,
    pub summary: MetricSummary,
    pub config: RunConfig,
}

/// One training run writing `metrics.csv`, `final.json`, `model.json` and,
/// with a context head, `partition.json` into `dir`.
fn run_one(cfg: &RunConfig, data: &SyntheticDataset, seed: u64, dir: &Path, log: &mut dyn Write) -> Result<RunResult> {
    create_dir(dir)?;
    let csv_path = dir.join(METRICS_FILE);
    let file = fs::File::create(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    let mut csv = BufWriter::new(file);
    let io_err = |e: std::io::Error| CbsaError::Io(e);
    writeln!(csv, "{}", EpochRecord::csv_header(data.spec.n_classes)).map_err(|e| CliError::io(&csv_path, e))?;
    let ablation = cfg.train.ablation;
    let outcome = train::train(&cfg.train, &cfg.model, data, seed, &mut |r: &EpochRecord| {
        writeln!(csv, "{}", r.csv_row()).map_err(io_err)?;
        csv.flush().map_err(io_err)?;
        let _ = writeln!(
            log,
            "[{ablation} seed {seed}] epoch {:>2}  mAP {:6.2}  CF1 {:.3}  pseudo-CF1 {:.3}  loss {:.4}/{:.4}/{:.4}",
            r.epoch,
            100.0 * r.map_val,
            r.cf1_val,
            r.pseudo_cf1,
            r.loss_sup,
            r.loss_unsup,
            r.loss_aux
        );
        Ok(())
    });
    let outcome = at(&csv_path, outcome)?;
    drop(csv);

    write_json(
        &dir.join(FINAL_FILE),
        &FinalReport {
            seed,
            ablation,
            metrics: &outcome.final_metrics,
            config: cfg,
        },
    )?;
    if let Some(p) = &outcome.partition {
        write_json(&dir.join(PARTITION_FILE), p)?;
    }
    let ckpt = Checkpoint::capture(&outcome.model, seed, cfg.train.n_contexts, outcome.partition.clone());
    write_json(&dir.join(MODEL_FILE), &ckpt)?;
    Ok(RunResult {
        seed,
        ablation,
        metrics: outcome.final_metrics,
    })
}

fn seed_list(cfg: &RunConfig, seeds: &[u64]) -> Vec<u64> {
    if seeds.is_empty() {
        vec![cfg.seed]
    } else {
        seeds.to_vec()
    }
}

#[derive(Clone, Debug)]
pub enum TrainReport {
    Single(RunResult),
    Multi(Box<MultiSeedReport>),
}

/// A single seed writes straight into `out_dir`. Several seeds each get a
/// `seed-<s>` subdirectory, and `out_dir/final.json` holds the mean and
/// standard error across them.
pub fn train(cfg: &RunConfig, seeds: &[u64], log: &mut dyn Write) -> Result<TrainReport> {
    let data = load_data(cfg)?;
    let seeds = seed_list(cfg, seeds);
    let out = &cfg.paths.out_dir;
    if let [seed] = seeds[..] {
        return Ok(TrainReport::Single(run_one(cfg, &data, seed, out, log)?));
    }
    let runs = seeds
        .iter()
        .map(|&s| run_one(cfg, &data, s, &out.join(format!("seed-{s}")), log))
        .collect::<Result<Vec<_>>>()?;
    let report = MultiSeedReport {
        summary: MetricSummary::of(&runs).expect("at least two runs"),
        seeds,
        ablation: cfg.train.ablation,
        runs,
        config: cfg.clone(),
    };
    write_json(&out.join(FINAL_FILE), &report)?;
    Ok(TrainReport::Multi(Box::new(report)))
}

/// Re-scores the validation set with the checkpoint in `out_dir`.
pub fn evaluate(cfg: &RunConfig) -> Result<Evaluation> {
    let data = load_data(cfg)?;
    let ckpt: Checkpoint = read_json(&cfg.paths.out_dir.join(MODEL_FILE))?;
    let model = ckpt.restore(&data)?;
    let eval = train::evaluate(&model, &data, ckpt.partition.as_ref(), cfg.train.threads)?;
    write_json(&cfg.paths.out_dir.join(EVAL_FILE), &eval)?;
    Ok(eval)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<RunResult>,
    pub summary: BTreeMap<String, MetricSummary>,
}

impl AblationReport {
    pub fn summary_of(&self, ablation: Ablation) -> &MetricSummary {
        &self.summary[&ablation.to_string()]
    }
}

/// Every ablation for every seed, in `out_dir/ablate/<ablation>/seed-<s>`.
pub fn ablate(cfg: &RunConfig, seeds: &[u64], log: &mut dyn Write) -> Result<AblationReport> {
    let data = load_data(cfg)?;
    let seeds = seed_list(cfg, seeds);
    let out = &cfg.paths.out_dir;
    let mut runs = Vec::new();
    let mut summary = BTreeMap::new();
    for ablation in Ablation::ALL {
        let mut run_cfg = cfg.clone();
        run_cfg.train.ablation = ablation;
        let these = seeds
            .iter()
            .map(|&s| run_one(&run_cfg, &data, s, &out.join("ablate").join(ablation.to_string()).join(format!("seed-{s}")), log))
            .collect::<Result<Vec<_>>>()?;
        summary.insert(ablation.to_string(), MetricSummary::of(&these).expect("at least one seed"));
        runs.extend(these);
    }
    let report = AblationReport { seeds, runs, summary };
    write_json(&out.join(ABLATION_JSON), &report)?;

    let mut table = String::from("ablation,seed,map_val,cf1_val,context_acc_val,pseudo_cf1_first_post_warmup,pseudo_cf1_final\n");
    for r in &report.runs {
        let m = &r.metrics;
        table.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.ablation,
            r.seed,
            m.map_val,
            m.cf1_val,
            m.context_acc_val.map_or(String::new(), |v| v.to_string()),
            m.pseudo_cf1_first_post_warmup,
            m.pseudo_cf1_final
        ));
    }
    let path = out.join(ABLATION_CSV);
    fs::write(&path, table).map_err(|e| CliError::io(&path, e))?;
    Ok(report)
}
