//! Experiment configuration files.
//!
//! A config is a JSON document; every optional field has a default and the
//! fully resolved config is echoed into the run's output directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use fairbat::data::{filter_classes, gen_mixture, load_dataset, Dataset, MixtureSpec};
use fairbat::train::{DEFAULT_ALPHA, DEFAULT_BETA};
use fairbat::{AttackConfig, Method, ModelSpec, SgdConfig, TargetOperands, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Where a dataset comes from. Relative paths resolve against the working
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Path(PathBuf),
    Mixture { spec: MixtureSpec, seed: u64 },
    FairnessStress { count: usize, seed: u64 },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset, CliError> {
        match self {
            Self::Path(p) => load_dataset_file(p),
            Self::Mixture { spec, seed } => Ok(gen_mixture(spec, *seed)?),
            Self::FairnessStress { count, seed } => Ok(gen_mixture(&MixtureSpec::fairness_stress(*count), *seed)?),
        }
    }
}

pub fn load_dataset_file(path: &Path) -> Result<Dataset, CliError> {
    if !path.is_file() {
        return Err(CliError::NotFound { what: "dataset", path: path.to_path_buf() });
    }
    Ok(load_dataset(path)?)
}

pub fn exclude_classes(ds: Dataset, exclude: &[usize]) -> Result<Dataset, CliError> {
    if exclude.is_empty() {
        return Ok(ds);
    }
    let set: BTreeSet<usize> = exclude.iter().copied().collect();
    Ok(filter_classes(&ds, &set)?)
}

fn default_beta() -> f32 {
    DEFAULT_BETA
}

fn default_alpha() -> f32 {
    DEFAULT_ALPHA
}

fn default_eval_every() -> usize {
    1
}

/// Training settings; the seed and evaluation attack come from the
/// enclosing [`ExperimentConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub method: Method,
    #[serde(default = "default_beta")]
    pub beta: f32,
    #[serde(default = "default_alpha")]
    pub alpha_target: f32,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: SgdConfig,
    #[serde(default = "AttackConfig::standard_train")]
    pub attack: AttackConfig,
    #[serde(default)]
    pub target_operands: TargetOperands,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub snapshot_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    /// Held-out set; when present, training ends with a fairness report on it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_dataset: Option<DatasetSource>,
    /// Classes dropped from both datasets before training (ids are remapped).
    #[serde(default)]
    pub exclude_classes: Vec<usize>,
    pub model: ModelSpec,
    pub train: TrainSection,
    #[serde(default = "AttackConfig::standard_eval")]
    pub eval_attack: AttackConfig,
    #[serde(default = "AttackConfig::standard_longrun")]
    pub longrun_attack: AttackConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if !path.is_file() {
            return Err(CliError::NotFound { what: "config", path: path.to_path_buf() });
        }
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train_config().validate()?;
        self.longrun_attack.validate()?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(CliError::Invalid("output_dir must not be empty".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            method: t.method,
            beta: t.beta,
            alpha_target: t.alpha_target,
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            attack: t.attack,
            eval_attack: self.eval_attack,
            target_operands: t.target_operands,
            eval_every: t.eval_every,
            snapshot_every: t.snapshot_every,
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
