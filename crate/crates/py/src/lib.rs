//! Python bindings: configs, datasets, checkpoints and the pipeline stages.

use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use unigen_core::config::PipelineConfig;
use unigen_core::data::{read_dataset, write_dataset, DatasetManifest};
use unigen_core::eval::{self, EvalReport};
use unigen_core::pipeline::{self as stages, PipelineOptions};
use unigen_core::relabel as core_relabel;
use unigen_core::tensor::Matrix;
use unigen_core::trainer::{self, Checkpoint as CoreCheckpoint, MemoryBank};
use unigen_core::weighting as core_weighting;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Round-trips any serialisable value through Python's `json` module.
fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    let text: String = py.import("json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

/// Every pipeline hyperparameter.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct Config {
    inner: PipelineConfig,
}

#[pymethods]
impl Config {
    /// Desk defaults, with keyword overrides: `Config(n_samples=500)`.
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(py: Python<'_>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut c = Self {
            inner: PipelineConfig::default(),
        };
        if let Some(kw) = overrides {
            for (k, v) in kw.iter() {
                c.set(py, k.extract()?, &v)?;
            }
        }
        Ok(c)
    }

    #[staticmethod]
    fn full_scale() -> Self {
        Self {
            inner: PipelineConfig::full_scale(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: PipelineConfig::from_toml_str(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: PipelineConfig::load(path).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn get(&self, py: Python<'_>, key: &str) -> PyResult<Py<PyAny>> {
        let value = serde_json::to_value(&self.inner).map_err(err)?;
        let field = value.get(key).ok_or_else(|| PyKeyError::new_err(key.to_string()))?;
        to_py(py, field)
    }

    /// Sets one field; the result is validated before it is kept.
    fn set(&mut self, py: Python<'_>, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let mut doc = serde_json::to_value(&self.inner).map_err(err)?;
        let slot = doc.get_mut(key).ok_or_else(|| PyKeyError::new_err(key.to_string()))?;
        *slot = from_py(py, value)?;
        let next: PipelineConfig = serde_json::from_value(doc).map_err(err)?;
        next.validate().map_err(err)?;
        self.inner = next;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={})", &self.inner.hash()[..12])
    }
}

/// A dataset artifact at some pipeline stage.
#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: DatasetManifest,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_dataset(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_dataset(&self.inner, path).map_err(err)
    }

    #[getter]
    fn stage(&self) -> String {
        self.inner.stage.to_string()
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash.clone()
    }

    #[getter]
    fn texts(&self) -> Vec<String> {
        self.inner.records.iter().map(|r| r.text.clone()).collect()
    }

    #[getter]
    fn soft_labels(&self) -> Vec<Vec<f64>> {
        self.inner.records.iter().map(|r| r.soft_label.clone()).collect()
    }

    #[getter]
    fn weights(&self) -> Vec<Option<f64>> {
        self.inner.records.iter().map(|r| r.weight).collect()
    }

    fn record(&self, py: Python<'_>, index: usize) -> PyResult<Py<PyAny>> {
        let r = self
            .inner
            .records
            .get(index)
            .ok_or_else(|| PyKeyError::new_err(format!("record {index} out of range")))?;
        to_py(py, r)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(stage={}, len={})", self.inner.stage, self.inner.len())
    }
}

/// A trained classifier.
#[pyclass(name = "Checkpoint")]
struct Checkpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreCheckpoint::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.config.seed
    }

    fn predict(&self, texts: Vec<String>) -> Vec<usize> {
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        self.inner.predict(&refs)
    }

    /// `(logits, projections)` as nested lists.
    fn encode(&self, texts: Vec<String>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let (logits, proj) = self.inner.encode(&refs);
        (logits.to_rows(), proj.to_rows())
    }
}

#[pyfunction]
fn generate(config: &Config) -> PyResult<Dataset> {
    let (inner, _) = stages::stage_generate(&config.inner).map_err(err)?;
    Ok(Dataset { inner })
}

/// Returns the relabeled dataset and the `{n_in, n_kept, n_removed, mode}` summary.
#[pyfunction]
fn relabel(py: Python<'_>, config: &Config, dataset: &Dataset) -> PyResult<(Dataset, Py<PyAny>)> {
    let (inner, summary) = stages::stage_relabel(&config.inner, &dataset.inner).map_err(err)?;
    Ok((Dataset { inner }, to_py(py, &summary)?))
}

/// Learns weights and selects; returns the selection and the per-epoch trace.
#[pyfunction]
fn weight(py: Python<'_>, config: &Config, dataset: &Dataset) -> PyResult<(Dataset, Py<PyAny>)> {
    let (inner, trace) = stages::stage_weight(&config.inner, &dataset.inner).map_err(err)?;
    Ok((Dataset { inner }, to_py(py, &trace)?))
}

/// Trains one classifier; returns it with the per-step loss log.
#[pyfunction]
#[pyo3(signature = (config, dataset, seed=0))]
fn train(py: Python<'_>, config: &Config, dataset: &Dataset, seed: u64) -> PyResult<(Checkpoint, Py<PyAny>)> {
    let out = py
        .detach(|| stages::stage_train(&config.inner, &dataset.inner, seed))
        .map_err(err)?;
    Ok((Checkpoint { inner: out.checkpoint }, to_py(py, &out.log)?))
}

/// Per-domain accuracy of the given checkpoints on the configured corpora.
#[pyfunction]
fn evaluate(py: Python<'_>, config: &Config, checkpoints: Vec<PyRef<'_, Checkpoint>>) -> PyResult<Py<PyAny>> {
    let corpora = stages::load_corpora(&config.inner).map_err(err)?;
    let refs: Vec<(u64, &CoreCheckpoint)> = checkpoints.iter().map(|c| (c.inner.config.seed, &c.inner)).collect();
    let report: EvalReport = eval::evaluate(&refs, &corpora).map_err(err)?;
    to_py(py, &report)
}

/// Runs every stage into `out_dir` and returns the evaluation report.
#[pyfunction]
#[pyo3(signature = (config, out_dir, skip_relabel=false, skip_weight=false))]
fn run_pipeline(py: Python<'_>, config: &Config, out_dir: PathBuf, skip_relabel: bool, skip_weight: bool) -> PyResult<Py<PyAny>> {
    let options = PipelineOptions {
        skip_relabel,
        skip_weight,
    };
    let run = py
        .detach(|| stages::run_pipeline(&config.inner, &options, &out_dir))
        .map_err(err)?;
    to_py(py, &run.report)
}

#[pyfunction]
fn soft_relabel(logits: Vec<f64>, tau_re: f64) -> Vec<f64> {
    core_relabel::soft_relabel(&logits, tau_re)
}

#[pyfunction]
fn robust_loss(probabilities: Vec<f64>, target: usize, q: f64) -> f64 {
    core_weighting::robust_loss(&probabilities, target, q)
}

/// Supervised contrastive loss of unit-norm anchors against an empty bank.
#[pyfunction]
fn scl_loss(anchors: Vec<Vec<f64>>, labels: Vec<usize>, tau: f64) -> PyResult<f64> {
    if anchors.len() != labels.len() || anchors.is_empty() {
        return Err(PyValueError::new_err("anchors and labels must be non-empty and equally long"));
    }
    Ok(trainer::scl_loss(&Matrix::from_rows(&anchors), &labels, &MemoryBank::new(1), tau))
}

#[pymodule]
fn unigen(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(relabel, m)?)?;
    m.add_function(wrap_pyfunction!(weight, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(soft_relabel, m)?)?;
    m.add_function(wrap_pyfunction!(robust_loss, m)?)?;
    m.add_function(wrap_pyfunction!(scl_loss, m)?)?;
    Ok(())
}
