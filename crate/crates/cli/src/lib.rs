//! Experiment runner behind the `mbn` binary.
//!
//! One experiment lives in one output directory:
//!
//! | file | written by |
//! |------|------------|
//! | `config.toml` | every command (effective config) |
//! | `train.txt`, `meta.txt`, `test.txt` | `gen-data` |
//! | `trace.csv`, `model.txt` | `train` |
//! | `report.json`, `roc.csv` | `eval` |

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use mbn_core::datagen::{generate, make_meta_split, make_test_split, GroupedDataset};
use mbn_core::fairmetrics::{evaluate, FairnessReport};
use mbn_core::gradcheck::{self, Fault, GradcheckConfig, GradcheckReport};
use mbn_core::trainer::{train, train_baseline, ModelParams, TrainData, TrainError, TrainOutput};
use thiserror::Error;

pub use config::{ExperimentConfig, Overrides};

pub const CONFIG_FILE: &str = "config.toml";
pub const TRAIN_FILE: &str = "train.txt";
pub const META_FILE: &str = "meta.txt";
pub const TEST_FILE: &str = "test.txt";
pub const TRACE_FILE: &str = "trace.csv";
pub const MODEL_FILE: &str = "model.txt";
pub const REPORT_FILE: &str = "report.json";
pub const ROC_FILE: &str = "roc.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Run(String),
    #[error("numerical abort: {0}")]
    Numeric(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Run(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::CheckFailed(_) => 3,
        }
    }
}

fn run_err(context: impl std::fmt::Display, e: impl std::fmt::Display) -> CliError {
    CliError::Run(format!("{context}: {e}"))
}

/// Creates the output directory and writes the effective config into it.
fn prepare(config: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = config.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| run_err(dir.display(), e))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, config.to_toml()?).map_err(|e| run_err(path.display(), e))?;
    Ok(dir)
}

pub struct Splits {
    pub train: GroupedDataset,
    pub meta: GroupedDataset,
    pub test: GroupedDataset,
}

/// Generates the three splits described by the data section.
pub fn generate_splits(config: &ExperimentConfig) -> Result<Splits, CliError> {
    let d = &config.data;
    let params = d.params(config.seed)?;
    let gen = |e| CliError::Run(format!("data generation: {e}"));
    Ok(Splits {
        train: generate(&params).map_err(gen)?,
        meta: make_meta_split(&params, d.meta_identities, d.meta_samples, config.seed).map_err(gen)?,
        test: make_test_split(&params, d.test_identities, d.test_samples, config.seed).map_err(gen)?,
    })
}

fn load_dataset(path: &Path) -> Result<GroupedDataset, CliError> {
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "dataset {} not found (run gen-data first)",
            path.display()
        )));
    }
    GroupedDataset::load(path).map_err(|e| run_err(path.display(), e))
}

fn dataset_path(config: &ExperimentConfig, given: &Option<PathBuf>, default: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| config.out_dir.join(default))
}

/// Loads the splits from the configured files, or from the output directory.
pub fn load_splits(config: &ExperimentConfig) -> Result<Splits, CliError> {
    let d = &config.data;
    Ok(Splits {
        train: load_dataset(&dataset_path(config, &d.train_file, TRAIN_FILE))?,
        meta: load_dataset(&dataset_path(config, &d.meta_file, META_FILE))?,
        test: load_dataset(&dataset_path(config, &d.test_file, TEST_FILE))?,
    })
}

/// Writes the splits and returns a per-group count summary.
pub fn cmd_gen_data(config: &ExperimentConfig) -> Result<String, CliError> {
    if config.data.from_files() {
        return Err(CliError::Config("data section points at existing files; nothing to generate".into()));
    }
    let dir = prepare(config)?;
    let splits = generate_splits(config)?;
    let mut lines = Vec::new();
    for (name, data) in [(TRAIN_FILE, &splits.train), (META_FILE, &splits.meta), (TEST_FILE, &splits.test)] {
        let path = dir.join(name);
        data.save(&path).map_err(|e| run_err(path.display(), e))?;
        let ids = data.group_identity_counts();
        let counts: Vec<String> = data
            .group_sample_counts()
            .iter()
            .map(|(g, n)| format!("g{g}={n} ({} ids)", ids[g]))
            .collect();
        lines.push(format!("{:<10} {}", name, counts.join(" ")));
    }
    Ok(lines.join("\n"))
}

/// Trains per the config; on a numerical abort the partial trace is still written.
pub fn cmd_train(config: &ExperimentConfig) -> Result<TrainOutput, CliError> {
    let splits = load_splits(config)?;
    let dir = prepare(config)?;
    let data = TrainData { train: &splits.train, meta: &splits.meta };
    let cfg = &config.trainer.config;
    let result = if config.trainer.mode.is_meta() { train(data, cfg) } else { train_baseline(data, cfg) };
    let trace_path = dir.join(TRACE_FILE);
    match result {
        Ok(out) => {
            out.trace.save_csv(&trace_path).map_err(|e| run_err(trace_path.display(), e))?;
            let model_path = dir.join(MODEL_FILE);
            out.model.save(&model_path).map_err(|e| run_err(model_path.display(), e))?;
            Ok(out)
        }
        Err(TrainError::NumericAbort { iteration, message, trace }) => {
            trace.save_csv(&trace_path).map_err(|e| run_err(trace_path.display(), e))?;
            Err(CliError::Numeric(format!("iteration {iteration}: {message}")))
        }
        Err(TrainError::Config(msg)) => Err(CliError::Config(msg)),
        Err(e) => Err(CliError::Run(e.to_string())),
    }
}

/// Evaluates `model` (default: the output directory's model file) on the test split.
pub fn cmd_eval(config: &ExperimentConfig, model: Option<&Path>) -> Result<FairnessReport, CliError> {
    let model_path = model.map(Path::to_path_buf).unwrap_or_else(|| config.out_dir.join(MODEL_FILE));
    if !model_path.is_file() {
        return Err(CliError::Config(format!("model {} not found (run train first)", model_path.display())));
    }
    let model = ModelParams::load(&model_path).map_err(|e| run_err(model_path.display(), e))?;
    let test = load_dataset(&dataset_path(config, &config.data.test_file, TEST_FILE))?;
    if model.raw_dim() != test.dim() {
        return Err(CliError::Run(format!(
            "model expects {}-dim inputs but the test split has {}",
            model.raw_dim(),
            test.dim()
        )));
    }
    let dir = prepare(config)?;
    let report = evaluate(&model, &test, &config.pair_config()).map_err(|e| run_err("evaluation", e))?;
    let report_path = dir.join(REPORT_FILE);
    report.save_json(&report_path).map_err(|e| run_err(report_path.display(), e))?;
    let roc_path = dir.join(ROC_FILE);
    report.save_roc_csv(&roc_path).map_err(|e| run_err(roc_path.display(), e))?;
    Ok(report)
}

/// Parses `check=factor`.
pub fn parse_fault(text: &str) -> Result<Fault, CliError> {
    let (check, factor) = text
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("fault `{text}` is not check=factor")))?;
    let factor: f64 = factor
        .parse()
        .map_err(|e| CliError::Config(format!("fault factor `{factor}`: {e}")))?;
    Ok(Fault { check: check.to_string(), factor })
}

/// Runs the derivative checks; a failing row maps to exit code 3.
pub fn cmd_gradcheck(config: &GradcheckConfig, fault: Option<&Fault>) -> Result<GradcheckReport, CliError> {
    if let Some(f) = fault {
        let known = gradcheck::check_names();
        if !known.iter().any(|n| n == &f.check) {
            return Err(CliError::Config(format!("unknown check `{}`", f.check)));
        }
    }
    gradcheck::run_with_fault(config, fault).map_err(|e| CliError::Run(e.to_string()))
}
