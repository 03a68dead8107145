//! Python bindings: corpus loading, training, phenotype reports, summaries and
//! the synthetic harness. Structured results come back as plain Python objects
//! (decoded from the same JSON the command-line tool writes).

use std::path::PathBuf;

use mctm::corpus::{load_corpus, load_records, Corpus as CoreCorpus};
use mctm::learning::{load_model, model_to_json, save_model, train as core_train, TrainConfig, TrainedModel};
use mctm::phenotype::{correlation_graph, extract_phenotypes};
use mctm::summarize::{self, default_buckets, Sankey};
use mctm::synth::{recovery_report, Scenario};
use mctm::Error;
use nalgebra::DVector;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::LineSearch { .. } | Error::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_value<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyfunction]
fn softmax(x: Vec<f64>) -> PyResult<Vec<f64>> {
    let v = mctm::numerics::softmax(&DVector::from_vec(x)).map_err(to_py)?;
    Ok(v.iter().copied().collect())
}

#[pyfunction]
fn log_sum_exp(x: Vec<f64>) -> PyResult<f64> {
    mctm::numerics::log_sum_exp(&DVector::from_vec(x)).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (proportions, mass = 0.9))]
fn coverage_count(proportions: Vec<f64>, mass: f64) -> PyResult<usize> {
    summarize::coverage_count(&proportions, mass).map_err(to_py)
}

/// Records with one bag of token counts per data type.
#[pyclass(frozen)]
struct Corpus {
    inner: CoreCorpus,
}

#[pymethods]
impl Corpus {
    /// Loads `vocab.json` and `records.jsonl` from a directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_corpus(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        mctm::corpus::save_corpus(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn num_records(&self) -> usize {
        self.inner.num_records()
    }

    #[getter]
    fn type_names(&self) -> Vec<String> {
        self.inner
            .vocabularies()
            .iter()
            .map(|v| v.type_name().to_string())
            .collect()
    }

    #[getter]
    fn vocab_sizes(&self) -> Vec<usize> {
        self.inner.vocab_sizes()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn __len__(&self) -> usize {
        self.inner.num_records()
    }
}

/// A trained (or planted) model.
#[pyclass(frozen)]
struct Model {
    inner: TrainedModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_model(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.inner, &path).map_err(to_py)
    }

    fn to_json(&self) -> String {
        model_to_json(&self.inner)
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn history(&self) -> Vec<f64> {
        self.inner.history.clone()
    }

    #[getter]
    fn mu0(&self) -> Vec<f64> {
        self.inner.params.mu0().iter().copied().collect()
    }

    #[getter]
    fn sigma0(&self) -> Vec<Vec<f64>> {
        let s = self.inner.params.sigma0();
        s.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    /// Topic-token probabilities (`K` rows) for one data type.
    fn beta(&self, type_name: &str) -> PyResult<Vec<Vec<f64>>> {
        let m = mctm::corpus::type_index(&self.inner.vocabularies, type_name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown data type {type_name:?}")))?;
        let b = self.inner.params.beta(m);
        Ok(b.row_iter().map(|r| r.iter().copied().collect()).collect())
    }

    /// Per-record phenotype proportions from training, in corpus order.
    fn proportions(&self) -> Vec<Vec<f64>> {
        self.inner
            .posteriors
            .iter()
            .map(|f| f.proportions().iter().copied().collect())
            .collect()
    }

    #[pyo3(signature = (top_n = 10, label_type = None))]
    fn phenotypes<'py>(
        &self,
        py: Python<'py>,
        top_n: usize,
        label_type: Option<String>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let label_type = label_type.unwrap_or_else(|| self.inner.vocabularies[0].type_name().to_string());
        let defs = extract_phenotypes(&self.inner, top_n, &label_type).map_err(to_py)?;
        json_value(py, &defs)
    }

    /// Edges `(i, j, rho)` of the relatedness graph from the prior covariance.
    #[pyo3(signature = (threshold = 0.5))]
    fn correlation_graph(&self, threshold: f64) -> PyResult<Vec<(usize, usize, f64)>> {
        let g = correlation_graph(&self.inner, threshold).map_err(to_py)?;
        Ok(g.edges.iter().map(|e| (e.i, e.j, e.rho)).collect())
    }

    /// Summaries of a JSONL file of time-segmented records, one per record.
    #[pyo3(signature = (record_file, top_n = 5))]
    fn summarize<'py>(&self, py: Python<'py>, record_file: PathBuf, top_n: usize) -> PyResult<Bound<'py, PyAny>> {
        let segments = load_records(&record_file, &self.inner.vocabularies).map_err(to_py)?;
        let trajectories = summarize::summarize_records(&segments, &self.inner, top_n).map_err(to_py)?;
        let sankeys: Vec<Sankey> = trajectories.iter().map(Sankey::from_trajectory).collect();
        json_value(
            py,
            &serde_json::json!({ "trajectories": trajectories, "sankey": sankeys }),
        )
    }

    /// `[(bucket, records, fraction)]` over the default buckets.
    #[pyo3(signature = (mass = 0.9))]
    fn coverage_histogram(&self, mass: f64) -> PyResult<Vec<(String, usize, f64)>> {
        let bins = summarize::coverage_histogram(&self.inner, mass, &default_buckets()).map_err(to_py)?;
        Ok(bins.iter().map(|b| (b.bucket.label(), b.records, b.fraction)).collect())
    }

    /// Recovery of `truth`'s phenotypes by this model.
    #[pyo3(signature = (truth, corr_threshold = 0.5))]
    fn recovery<'py>(&self, py: Python<'py>, truth: &Model, corr_threshold: f64) -> PyResult<Bound<'py, PyAny>> {
        let planted = mctm::synth::PlantedModel {
            params: truth.inner.params.clone(),
            per_record_nu: Vec::new(),
            per_token_assignments: None,
            seed: truth.inner.config.seed,
        };
        let report = recovery_report(&self.inner.params, &planted, corr_threshold).map_err(to_py)?;
        json_value(py, &report)
    }
}

#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (corpus, k, seed, max_em_iters = 200, em_tol = 1e-5, restarts = 1, update_prior = true))]
fn train(
    py: Python<'_>,
    corpus: &Corpus,
    k: usize,
    seed: u64,
    max_em_iters: usize,
    em_tol: f64,
    restarts: usize,
    update_prior: bool,
) -> PyResult<Model> {
    let cfg = TrainConfig {
        k,
        seed,
        max_em_iters,
        em_tol,
        restarts,
        update_prior,
        ..TrainConfig::default()
    };
    let inner = py.detach(|| core_train(&corpus.inner, &cfg)).map_err(to_py)?;
    Ok(Model { inner })
}

/// Samples a named synthetic scenario; returns the corpus and the planted model.
#[pyfunction]
#[pyo3(signature = (preset, records = None, seed = None))]
fn sample_preset(preset: &str, records: Option<usize>, seed: Option<u64>) -> PyResult<(Corpus, Model)> {
    let mut scenario = Scenario::preset(preset).map_err(to_py)?;
    if let Some(n) = records {
        scenario.num_records = n;
    }
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let (corpus, planted) = scenario.sample().map_err(to_py)?;
    let truth = planted.to_trained_model(&corpus);
    Ok((Corpus { inner: corpus }, Model { inner: truth }))
}

#[pymodule]
pub fn pymctm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(log_sum_exp, m)?)?;
    m.add_function(wrap_pyfunction!(coverage_count, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sample_preset, m)?)?;
    m.add_class::<Corpus>()?;
    m.add_class::<Model>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
