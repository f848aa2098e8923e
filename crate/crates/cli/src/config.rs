//! Run configuration: defaults, then a TOML file, then `CBSA_*` environment
//! variables, then command-line flags.

use std::path::{Path, PathBuf};

use cbsa_core::model::{Ablation, ModelConfig};
use cbsa_core::synth::SyntheticSpec;
use cbsa_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

pub const ENV_PREFIX: &str = "CBSA_";
/// Separates nesting levels in variable names: `CBSA_TRAIN__BATCH_SIZE`.
pub const ENV_SEPARATOR: &str = "__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_total: usize,
    pub n_val: usize,
    pub labeled_fraction: f64,
    pub spec: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_total: 600,
            n_val: 200,
            labeled_fraction: 0.05,
            spec: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Values given on the command line. `None` leaves the layer below in place.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub ablation: Option<Ablation>,
    pub out_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
}

fn merge(base: &mut Table, top: Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// A TOML scalar or array when the text parses as one, else a plain string.
fn env_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn env_layer<I, K, V>(vars: I) -> Result<Table, CliError>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut layer = Table::new();
    for (key, raw) in vars {
        let Some(rest) = key.as_ref().strip_prefix(ENV_PREFIX) else { continue };
        let path: Vec<String> = rest.split(ENV_SEPARATOR).map(str::to_ascii_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(CliError::Config(format!("malformed variable name {}", key.as_ref())));
        }
        let (leaf, parents) = path.split_last().expect("split yields one part");
        let mut table = &mut layer;
        for p in parents {
            let entry = table.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
            table = match entry {
                Value::Table(t) => t,
                _ => return Err(CliError::Config(format!("{} sets a value and a section", key.as_ref()))),
            };
        }
        table.insert(leaf.clone(), env_value(raw.as_ref()));
    }
    Ok(layer)
}

/// Resolves the layers in precedence order: flag > environment > file > default.
pub fn resolve<I, K, V>(file: Option<&Path>, env: I, flags: &Overrides) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut table = match Value::try_from(RunConfig::default()).map_err(|e| CliError::Config(e.to_string()))? {
        Value::Table(t) => t,
        _ => unreachable!("a struct serializes to a table"),
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let parsed: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
        merge(&mut table, parsed);
    }
    merge(&mut table, env_layer(env)?);
    let mut cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;

    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = flags.threads {
        cfg.train.threads = threads;
    }
    if let Some(ablation) = flags.ablation {
        cfg.train.ablation = ablation;
    }
    if let Some(dir) = &flags.out_dir {
        cfg.paths.out_dir = dir.clone();
    }
    if let Some(dir) = &flags.data_dir {
        cfg.paths.data_dir = dir.clone();
    }
    Ok(cfg)
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
