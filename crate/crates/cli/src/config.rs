//! TOML experiment configuration.
//!
//! ```toml
//! label = "demo"
//! out_dir = "runs/demo"
//! seed = 0
//!
//! [data]
//! ratio = "7:1:1:1"          # or an explicit [[data.groups]] list
//! total_classes = 200
//! samples_per_class = 10
//! sigmas = [0.25, 0.35, 0.40, 0.45]
//!
//! [trainer]
//! mode = "mbn-arc"
//! iterations = 2000
//! lr_margin = { base = 0.05 }  # any TrainerConfig field; the rest are mode defaults
//!
//! [eval]
//! budget = 600
//! ```
//!
//! Relative paths are resolved against the working directory.

use std::path::{Path, PathBuf};

use mbn_core::datagen::{parse_ratio, ratio_specs, DataParams, GroupSpec};
use mbn_core::fairmetrics::PairConfig;
use mbn_core::trainer::{Mode, TrainerConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_ITERATIONS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub label: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub data: DataConfig,
    pub trainer: TrainerSection,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigmas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<GroupSpec>>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subspace_dim: Option<usize>,
    #[serde(default = "default_meta_identities")]
    pub meta_identities: usize,
    #[serde(default = "default_samples")]
    pub meta_samples: usize,
    #[serde(default = "default_test_identities")]
    pub test_identities: usize,
    #[serde(default = "default_samples")]
    pub test_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_file: Option<PathBuf>,
}

fn default_dim() -> usize {
    32
}
fn default_meta_identities() -> usize {
    10
}
fn default_test_identities() -> usize {
    40
}
fn default_samples() -> usize {
    4
}

/// Trainer settings: the mode plus every `TrainerConfig` field, flattened.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainerSection {
    pub mode: Mode,
    #[serde(flatten)]
    pub config: TrainerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_difficulty")]
    pub difficulty: f64,
}

fn default_budget() -> usize {
    PairConfig::default().budget
}
fn default_difficulty() -> f64 {
    PairConfig::default().difficulty
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { budget: default_budget(), difficulty: default_difficulty() }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Overlays `user` onto `base`, recursing into tables. Keys absent from
/// `base` are rejected unless listed in `optional`.
fn merge(base: &mut toml::Table, user: toml::Table, path: &str, optional: &[&str]) -> Result<(), CliError> {
    for (key, value) in user {
        let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u, &full, optional)?,
            (Some(slot), v) => *slot = v,
            (None, v) if optional.contains(&full.as_str()) => {
                base.insert(key, v);
            }
            (None, _) => return Err(config_err(format!("unknown trainer key `{full}`"))),
        }
    }
    Ok(())
}

/// Builds the effective trainer section: mode defaults for `iterations` and
/// `seed`, then the user's overrides.
fn trainer_section(mut raw: toml::Table, seed: u64, mode_override: Option<Mode>) -> Result<TrainerSection, CliError> {
    let mode = match (mode_override, raw.remove("mode")) {
        (Some(m), _) => m,
        (None, Some(toml::Value::String(s))) => {
            Mode::parse(&s).ok_or_else(|| config_err(format!("unknown mode `{s}`")))?
        }
        (None, Some(v)) => return Err(config_err(format!("trainer.mode must be a string, got {v}"))),
        (None, None) => return Err(config_err("trainer.mode is required")),
    };
    let iterations = match raw.get("iterations") {
        Some(toml::Value::Integer(n)) if *n > 0 => *n as usize,
        Some(v) => return Err(config_err(format!("trainer.iterations must be a positive integer, got {v}"))),
        None => DEFAULT_ITERATIONS,
    };
    if raw.contains_key("seed") {
        return Err(config_err("trainer.seed is not allowed; set the top-level seed"));
    }
    let defaults = TrainerConfig::for_mode(mode, iterations, seed);
    let mut table = toml::Table::try_from(&defaults).map_err(|e| config_err(e.to_string()))?;
    merge(&mut table, raw, "", &["margin_bounds"])?;
    let config: TrainerConfig = table.try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
    Ok(TrainerSection { mode, config })
}

/// File layout before the trainer section is merged over the mode defaults.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    label: String,
    out_dir: PathBuf,
    #[serde(default)]
    seed: u64,
    data: DataConfig,
    trainer: toml::Table,
    #[serde(default)]
    eval: EvalConfig,
}

/// Overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &Overrides) -> Result<Self, CliError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        let seed = overrides.seed.unwrap_or(raw.seed);
        let config = ExperimentConfig {
            label: raw.label,
            out_dir: overrides.out_dir.clone().unwrap_or(raw.out_dir),
            seed,
            data: raw.data,
            trainer: trainer_section(raw.trainer, seed, overrides.mode)?,
            eval: raw.eval,
        };
        config.validate()?;
        Ok(config)
    }

    /// The effective config as TOML; parsing it back yields `self`.
    pub fn to_toml(&self) -> Result<String, CliError> {
        let mut table = toml::Table::try_from(self).map_err(|e| config_err(e.to_string()))?;
        // The trainer seed always follows the top-level one.
        if let Some(toml::Value::Table(t)) = table.get_mut("trainer") {
            t.remove("seed");
        }
        toml::to_string(&table).map_err(|e| config_err(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.label.trim().is_empty() {
            return Err(config_err("label must not be empty"));
        }
        let groups = self.data.validate()?;
        self.trainer.config.validate(groups).map_err(|e| config_err(e.to_string()))?;
        let e = &self.eval;
        if e.budget < 2 {
            return Err(config_err("eval.budget must be at least 2"));
        }
        if !(0.0..=1.0).contains(&e.difficulty) {
            return Err(config_err(format!("eval.difficulty must be in [0, 1], got {}", e.difficulty)));
        }
        Ok(())
    }

    pub fn pair_config(&self) -> PairConfig {
        PairConfig { budget: self.eval.budget, difficulty: self.eval.difficulty, seed: self.seed }
    }
}

impl DataConfig {
    /// Whether the splits come from files rather than the generator.
    pub fn from_files(&self) -> bool {
        self.train_file.is_some()
    }

    fn files(&self) -> [&Option<PathBuf>; 3] {
        [&self.train_file, &self.meta_file, &self.test_file]
    }

    /// Checks the section and returns the group count when it is known up front.
    fn validate(&self) -> Result<usize, CliError> {
        let given = self.files().iter().filter(|f| f.is_some()).count();
        if given > 0 {
            if given < 3 {
                return Err(config_err("train_file, meta_file and test_file must be given together"));
            }
            if self.ratio.is_some() || self.groups.is_some() {
                return Err(config_err("dataset files exclude ratio/groups"));
            }
            for f in self.files().into_iter().flatten() {
                if !f.is_file() {
                    return Err(config_err(format!("dataset file {} does not exist", f.display())));
                }
            }
            let train = mbn_core::datagen::GroupedDataset::load(self.train_file.as_ref().unwrap())
                .map_err(|e| config_err(e.to_string()))?;
            return Ok(train.group_count());
        }
        if self.meta_identities < 2 || self.test_identities < 2 {
            return Err(config_err("meta and test splits need at least 2 identities per group"));
        }
        if self.meta_samples < 2 || self.test_samples < 2 {
            return Err(config_err("meta and test splits need at least 2 samples per identity"));
        }
        let params = self.params(0)?;
        params.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(params.group_count())
    }

    pub fn specs(&self) -> Result<Vec<GroupSpec>, CliError> {
        match (&self.groups, &self.ratio) {
            (Some(_), Some(_)) => Err(config_err("give either data.groups or data.ratio, not both")),
            (Some(g), None) => Ok(g.clone()),
            (None, Some(r)) => {
                let ratio = parse_ratio(r).map_err(|e| config_err(e.to_string()))?;
                let total = self.total_classes.ok_or_else(|| config_err("data.ratio needs total_classes"))?;
                let spc = self.samples_per_class.ok_or_else(|| config_err("data.ratio needs samples_per_class"))?;
                let sigmas = self.sigmas.as_ref().ok_or_else(|| config_err("data.ratio needs sigmas"))?;
                ratio_specs(&ratio, total, spc, sigmas).map_err(|e| config_err(e.to_string()))
            }
            (None, None) => Err(config_err("data needs groups, ratio, or dataset files")),
        }
    }

    pub fn params(&self, seed: u64) -> Result<DataParams, CliError> {
        let mut p = DataParams::new(self.specs()?, self.dim, seed);
        if let Some(s) = self.subspace_dim {
            p = p.with_subspace_dim(s);
        }
        Ok(p)
    }
}
