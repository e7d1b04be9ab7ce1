//! Python bindings: data generation, training, evaluation and the derivative checks.

use mbn_core::datagen::{self, DataParams, GroupedDataset};
use mbn_core::fairmetrics::{self, FairnessReport, PairConfig};
use mbn_core::gradcheck::{self as checks, GradcheckConfig};
use mbn_core::trainer::{self, Mode, ModelParams, TrainData, TrainError, TrainOutput, TrainerConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_mode(name: &str) -> PyResult<Mode> {
    Mode::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown mode `{name}`")))
}

#[pyclass(name = "Dataset", module = "mbn", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: GroupedDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        GroupedDataset::load(path).map(|inner| Self { inner }).map_err(value_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(value_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn identities(&self) -> Vec<usize> {
        self.inner.identities.clone()
    }

    #[getter]
    fn groups(&self) -> Vec<usize> {
        self.inner.groups.clone()
    }

    /// Rows as lists of floats.
    fn features(&self) -> Vec<Vec<f64>> {
        self.inner.features.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    /// Samples per group, indexed by group.
    fn group_counts(&self) -> Vec<usize> {
        self.inner.group_sample_counts().into_values().collect()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

/// Train, meta and test splits drawn from one generator.
#[pyfunction]
#[pyo3(signature = (ratio, total_classes, samples_per_class, sigmas, dim=32, subspace_dim=None,
                    meta=(10, 4), test=(40, 4), seed=0))]
#[allow(clippy::too_many_arguments)]
fn generate_splits(
    ratio: &str,
    total_classes: usize,
    samples_per_class: usize,
    sigmas: Vec<f64>,
    dim: usize,
    subspace_dim: Option<usize>,
    meta: (usize, usize),
    test: (usize, usize),
    seed: u64,
) -> PyResult<(PyDataset, PyDataset, PyDataset)> {
    let ratio = datagen::parse_ratio(ratio).map_err(value_err)?;
    let specs = datagen::ratio_specs(&ratio, total_classes, samples_per_class, &sigmas).map_err(value_err)?;
    let mut params = DataParams::new(specs, dim, seed);
    if let Some(s) = subspace_dim {
        params = params.with_subspace_dim(s);
    }
    let wrap = |d: datagen::Result<GroupedDataset>| d.map(|inner| PyDataset { inner }).map_err(value_err);
    Ok((
        wrap(datagen::generate(&params))?,
        wrap(datagen::make_meta_split(&params, meta.0, meta.1, seed))?,
        wrap(datagen::make_test_split(&params, test.0, test.1, seed))?,
    ))
}

/// Trainer settings for one mode. Fields not exposed as properties can be
/// changed through `to_json` / `from_json`.
#[pyclass(name = "TrainerConfig", module = "mbn", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainerConfig {
    mode: Mode,
    inner: TrainerConfig,
}

#[pymethods]
impl PyTrainerConfig {
    #[new]
    #[pyo3(signature = (mode, iterations=2000, seed=0))]
    fn new(mode: &str, iterations: usize, seed: u64) -> PyResult<Self> {
        let mode = parse_mode(mode)?;
        Ok(Self { mode, inner: TrainerConfig::for_mode(mode, iterations, seed) })
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.mode.name()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.batch_size
    }

    #[setter]
    fn set_batch_size(&mut self, value: usize) {
        self.inner.batch_size = value;
    }

    /// Base margin learning rate; decay milestones are kept.
    #[getter]
    fn margin_lr(&self) -> f64 {
        self.inner.lr_margin.base
    }

    #[setter]
    fn set_margin_lr(&mut self, value: f64) {
        self.inner.lr_margin.base = value;
    }

    #[getter]
    fn model_lr(&self) -> f64 {
        self.inner.lr_model.base
    }

    #[setter]
    fn set_model_lr(&mut self, value: f64) {
        self.inner.lr_model.base = value;
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.inner.scale
    }

    #[setter]
    fn set_scale(&mut self, value: f64) {
        self.inner.scale = value;
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }

    #[staticmethod]
    fn from_json(mode: &str, text: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(text).map_err(value_err)?;
        Ok(Self { mode: parse_mode(mode)?, inner })
    }
}

#[pyclass(name = "Model", module = "mbn", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        ModelParams::load(path).map(|inner| Self { inner }).map_err(value_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(value_err)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.raw_dim()
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }

    /// Unit-norm embeddings of every sample in `data`.
    fn embed(&self, data: &PyDataset) -> PyResult<Vec<Vec<f64>>> {
        if data.inner.dim() != self.inner.raw_dim() {
            return Err(PyValueError::new_err(format!(
                "model expects {}-dim inputs, dataset has {}",
                self.inner.raw_dim(),
                data.inner.dim()
            )));
        }
        let e = self.inner.embed(&data.inner.features);
        Ok(e.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

#[pyclass(name = "TrainResult", module = "mbn")]
struct PyTrainResult {
    out: TrainOutput,
}

#[pymethods]
impl PyTrainResult {
    #[getter]
    fn model(&self) -> PyModel {
        PyModel { inner: self.out.model.clone() }
    }

    /// Final margin of every group.
    #[getter]
    fn margins(&self) -> Vec<f64> {
        self.out.schedule.all_margins()
    }

    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.out.trace.records.iter().map(|r| r.train_loss).collect()
    }

    /// Per-iteration margins, one list per iteration.
    #[getter]
    fn margin_history(&self) -> Vec<Vec<f64>> {
        self.out.trace.records.iter().map(|r| r.margins.clone()).collect()
    }

    fn trace_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.out.trace.write_csv(&mut buf).map_err(value_err)?;
        String::from_utf8(buf).map_err(value_err)
    }
}

/// Meta training for `mbn-*` modes, fixed margins otherwise.
#[pyfunction]
fn train(py: Python<'_>, train: &PyDataset, meta: &PyDataset, config: &PyTrainerConfig) -> PyResult<PyTrainResult> {
    let mode = config.mode;
    let cfg = &config.inner;
    let result = py.detach(|| {
        let data = TrainData { train: &train.inner, meta: &meta.inner };
        if mode.is_meta() { trainer::train(data, cfg) } else { trainer::train_baseline(data, cfg) }
    });
    match result {
        Ok(out) => Ok(PyTrainResult { out }),
        Err(e @ TrainError::Config(_)) => Err(value_err(e)),
        Err(e) => Err(PyRuntimeError::new_err(e.to_string())),
    }
}

#[pyclass(name = "Report", module = "mbn")]
struct PyReport {
    inner: FairnessReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn average(&self) -> f64 {
        self.inner.average
    }

    #[getter]
    fn std(&self) -> f64 {
        self.inner.std
    }

    /// None when some group has zero error.
    #[getter]
    fn ser(&self) -> Option<f64> {
        self.inner.ser.value()
    }

    #[getter]
    fn accuracies(&self) -> Vec<f64> {
        self.inner.accuracies()
    }

    fn summary_line(&self) -> String {
        self.inner.summary_line()
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("Report({})", self.inner.summary_line())
    }
}

#[pyfunction]
#[pyo3(signature = (model, test, budget=600, difficulty=0.5, seed=0))]
fn evaluate(model: &PyModel, test: &PyDataset, budget: usize, difficulty: f64, seed: u64) -> PyResult<PyReport> {
    let config = PairConfig { budget, difficulty, seed };
    fairmetrics::evaluate(&model.inner, &test.inner, &config)
        .map(|inner| PyReport { inner })
        .map_err(value_err)
}

/// `(average, std, ser)` from per-group accuracies in percent; `ser` is None when degenerate.
#[pyfunction]
fn fairness_summary(accuracies: Vec<f64>) -> PyResult<(f64, f64, Option<f64>)> {
    let s = fairmetrics::fairness_summary(&accuracies).map_err(value_err)?;
    Ok((s.average, s.std, s.ser.value()))
}

/// Best single-threshold accuracy (percent) and its threshold.
#[pyfunction]
fn verification_accuracy(scores: Vec<f64>, flags: Vec<bool>) -> PyResult<(f64, f64)> {
    fairmetrics::verification_accuracy(&scores, &flags).map_err(value_err)
}

/// Runs the derivative checks; returns `(passed, table)`.
#[pyfunction]
#[pyo3(signature = (instances=100, meta_states=20, seed=0))]
fn gradcheck(py: Python<'_>, instances: usize, meta_states: usize, seed: u64) -> PyResult<(bool, String)> {
    let config = GradcheckConfig { seed, instances, meta_states, ..GradcheckConfig::default() };
    let report = py.detach(|| checks::run(&config)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((report.passed(), report.table()))
}

#[pymodule]
fn mbn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainerConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(generate_splits, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(fairness_summary, m)?)?;
    m.add_function(wrap_pyfunction!(verification_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
