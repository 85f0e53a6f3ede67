//! Run configuration: a TOML file with `[data]`, `[nets]`, `[losses]` and
//! `[trainer]` sections, plus `key=value` command-line overrides.
//!
//! Precedence is override > file > default.

use std::path::{Path, PathBuf};

use dlsc::data::{idx_dataset, load_csv, synth_gmm, CsvOptions, Dataset, Scaling};
use dlsc::losses::{Ablation, CriticMode, LossWeights};
use dlsc::nets::OutputActivation;
use dlsc::trainer::{ObjectiveMode, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Csv,
    Idx,
    #[default]
    Synth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub scaling: Scaling,
    /// CSV file.
    pub path: Option<PathBuf>,
    pub has_label: bool,
    pub delimiter: char,
    pub has_header: bool,
    /// IDX image and label files.
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub downscale: bool,
    pub synth_clusters: usize,
    pub synth_dim: usize,
    pub synth_per_cluster: usize,
    pub synth_mean_scale: f64,
    pub synth_std: f64,
    pub synth_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let csv = CsvOptions::default();
        DataConfig {
            source: DataSource::Synth,
            scaling: Scaling::Standardize,
            path: None,
            has_label: csv.has_label,
            delimiter: csv.delimiter,
            has_header: csv.has_header,
            images: None,
            labels: None,
            downscale: false,
            synth_clusters: 3,
            synth_dim: 2,
            synth_per_cluster: 500,
            synth_mean_scale: 6.0,
            synth_std: 1.0,
            synth_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetsConfig {
    pub hidden: Vec<usize>,
    pub init_std: f64,
    pub gen_activation: OutputActivation,
}

impl Default for NetsConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        NetsConfig {
            hidden: t.hidden,
            init_std: t.init_std,
            gen_activation: t.gen_activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossesConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
    pub lambda_gp: f64,
    pub lambda_n: f64,
    pub lambda_c: f64,
    pub critic_mode: CriticMode,
    pub bandwidth: Option<f64>,
}

impl Default for LossesConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        LossesConfig {
            beta1: w.beta1,
            beta2: w.beta2,
            beta3: w.beta3,
            beta4: w.beta4,
            lambda_gp: w.lambda_gp,
            lambda_n: w.lambda_n,
            lambda_c: w.lambda_c,
            critic_mode: CriticMode::default(),
            bandwidth: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub clusters: usize,
    pub latent_dim: usize,
    pub sigma: f64,
    pub batch_size: usize,
    pub critic_steps: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub objective: ObjectiveMode,
    pub ablate: Vec<Ablation>,
    pub eval_every: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainerConfig {
            clusters: t.clusters,
            latent_dim: t.latent_dim,
            sigma: t.sigma,
            batch_size: t.batch_size,
            critic_steps: t.critic_steps,
            lr: t.lr,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            total_steps: t.total_steps,
            seed: t.seed,
            objective: t.objective,
            ablate: t.ablate,
            eval_every: t.eval_every,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub nets: NetsConfig,
    pub losses: LossesConfig,
    pub trainer: TrainerConfig,
}

impl RunConfig {
    /// Reads `path` (when given) and applies `overrides` of the form
    /// `key=value` or `section.key=value`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: Table) -> Result<Self, CliError> {
        let unknown = unknown_keys(&table);
        if !unknown.is_empty() {
            return Err(CliError::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.train_config().validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        let (t, n, l) = (&self.trainer, &self.nets, &self.losses);
        TrainConfig {
            clusters: t.clusters,
            latent_dim: t.latent_dim,
            sigma: t.sigma,
            batch_size: t.batch_size,
            critic_steps: t.critic_steps,
            weights: LossWeights {
                beta1: l.beta1,
                beta2: l.beta2,
                beta3: l.beta3,
                beta4: l.beta4,
                lambda_gp: l.lambda_gp,
                lambda_n: l.lambda_n,
                lambda_c: l.lambda_c,
            },
            lr: t.lr,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            total_steps: t.total_steps,
            seed: t.seed,
            objective: t.objective,
            ablate: t.ablate.clone(),
            gen_activation: n.gen_activation,
            critic_mode: l.critic_mode,
            hidden: n.hidden.clone(),
            init_std: n.init_std,
            bandwidth: l.bandwidth,
            eval_every: t.eval_every,
        }
    }
}

/// Every key a section accepts, read off a fully populated default.
fn known_keys() -> Table {
    let mut c = RunConfig::default();
    c.data.path = Some(PathBuf::new());
    c.data.images = Some(PathBuf::new());
    c.data.labels = Some(PathBuf::new());
    c.losses.bandwidth = Some(1.0);
    toml::to_string(&c).unwrap().parse::<Table>().unwrap()
}

fn unknown_keys(table: &Table) -> Vec<String> {
    let known = known_keys();
    let mut bad = Vec::new();
    for (section, v) in table {
        match (known.get(section), v) {
            (Some(Value::Table(k)), Value::Table(t)) => {
                bad.extend(t.keys().filter(|key| !k.contains_key(*key)).map(|key| format!("{section}.{key}")));
            }
            (Some(_), _) => {}
            (None, _) => bad.push(section.clone()),
        }
    }
    bad
}

fn apply_override(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let (section, field) = match key.split_once('.') {
        Some((s, f)) => (s.to_string(), f.to_string()),
        None => {
            let known = known_keys();
            let owners: Vec<&String> = known
                .iter()
                .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
                .map(|(s, _)| s)
                .collect();
            match owners.as_slice() {
                [one] => ((*one).clone(), key.to_string()),
                [] => return Err(CliError::Config(format!("unknown config keys: {key}"))),
                _ => return Err(CliError::Config(format!("key `{key}` is ambiguous; prefix it with a section"))),
            }
        }
    };
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let entry = table.entry(section.clone()).or_insert_with(|| Value::Table(Table::new()));
    let Value::Table(t) = entry else {
        return Err(CliError::Config(format!("`{section}` is not a section")));
    };
    t.insert(field, value);
    Ok(())
}

/// Short description of where the data came from.
pub fn describe_source(d: &DataConfig) -> String {
    match d.source {
        DataSource::Csv => format!("csv:{}", d.path.as_deref().unwrap_or(Path::new("?")).display()),
        DataSource::Idx => format!("idx:{}", d.images.as_deref().unwrap_or(Path::new("?")).display()),
        DataSource::Synth => format!(
            "synth:k={},d={},n={},mean_scale={},std={},seed={}",
            d.synth_clusters, d.synth_dim, d.synth_per_cluster, d.synth_mean_scale, d.synth_std, d.synth_seed
        ),
    }
}

fn existing(p: &Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
    let p = p
        .clone()
        .ok_or_else(|| CliError::Config(format!("data.{key} is required for this source")))?;
    if !p.is_file() {
        return Err(CliError::Config(format!("data.{key}: no such file {}", p.display())));
    }
    Ok(p)
}

/// Loads and scales the configured dataset. Missing files are config errors.
pub fn load_dataset(d: &DataConfig) -> Result<Dataset, CliError> {
    let ds = match d.source {
        DataSource::Csv => {
            let path = existing(&d.path, "path")?;
            let opts = CsvOptions {
                has_label: d.has_label,
                delimiter: d.delimiter,
                has_header: d.has_header,
            };
            load_csv(path, &opts)?
        }
        DataSource::Idx => {
            let images = existing(&d.images, "images")?;
            let read = |p: &Path| std::fs::read(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())));
            let img = read(&images)?;
            let lab = match &d.labels {
                Some(_) => Some(read(&existing(&d.labels, "labels")?)?),
                None => None,
            };
            idx_dataset(&img, lab.as_deref(), d.downscale)?
        }
        DataSource::Synth => synth_gmm(
            d.synth_clusters,
            d.synth_dim,
            d.synth_per_cluster,
            d.synth_mean_scale,
            d.synth_std,
            d.synth_seed,
        )?,
    };
    Ok(ds.scaled(d.scaling))
}
