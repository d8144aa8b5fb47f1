//! Python bindings for the claimcheck toolkit.
//!
//! Structured values cross the boundary as plain dicts and lists (via JSON),
//! labels as the strings "factual", "hallucinated" and "unlabeled".

use std::path::PathBuf;

use claimcheck::claims::{ClaimPipeline, PipelineConfig};
use claimcheck::detectors::{Detector, DetectorKind};
use claimcheck::estimators::{aggregate, run_estimator_panel, AggregatorSpec};
use claimcheck::eval::{self, Prediction};
use claimcheck::finetune::{BuildOptions, DatasetBuilder};
use claimcheck::gateway::{Gateway, GatewayOptions, GenerationRequest, HttpBackend, HttpConfig, MockBackend};
use claimcheck::probe::{self, EmbeddingType, TrainConfig, WeightEncoding};
use claimcheck::{Claim, Label, PromptRecord, SplitRatios, ThresholdConfig, TokenScore};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(claimcheck, ClaimcheckError, PyException);
create_exception!(claimcheck, InfeasibleError, ClaimcheckError);
create_exception!(claimcheck, BackendError, ClaimcheckError);

fn err(e: claimcheck::Error) -> PyErr {
    match &e {
        claimcheck::Error::Infeasible { .. } => InfeasibleError::new_err(e.to_string()),
        e if e.is_backend() => BackendError::new_err(e.to_string()),
        _ => ClaimcheckError::new_err(e.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn parse_label(s: &str) -> PyResult<Label> {
    match s {
        "factual" => Ok(Label::Factual),
        "hallucinated" => Ok(Label::Hallucinated),
        "unlabeled" => Ok(Label::Unlabeled),
        other => Err(PyValueError::new_err(format!("unknown label {other:?}"))),
    }
}

fn parse_labels(labels: Vec<String>) -> PyResult<Vec<Label>> {
    labels.iter().map(|s| parse_label(s)).collect()
}

fn parse_predictions(preds: Vec<Option<bool>>) -> Vec<Prediction> {
    preds
        .into_iter()
        .map(|p| match p {
            Some(true) => Prediction::Factual,
            Some(false) => Prediction::Hallucinated,
            None => Prediction::Unknown,
        })
        .collect()
}

/// Balanced accuracy of binary predictions (True = factual).
#[pyfunction]
fn bacc(predictions: Vec<Option<bool>>, labels: Vec<String>) -> PyResult<f64> {
    eval::bacc(&parse_predictions(predictions), &parse_labels(labels)?).map_err(err)
}

/// Balanced accuracy where None (unknown) counts as correct.
#[pyfunction]
fn bacc_unknown(predictions: Vec<Option<bool>>, labels: Vec<String>) -> PyResult<f64> {
    eval::bacc_unknown(&parse_predictions(predictions), &parse_labels(labels)?).map_err(err)
}

/// Returns (tau, bacc).
#[pyfunction]
fn search_threshold(scores: Vec<f64>, labels: Vec<String>) -> PyResult<(f64, f64)> {
    let fit = eval::search_threshold(&scores, &parse_labels(labels)?).map_err(err)?;
    Ok((fit.tau, fit.bacc))
}

#[pyfunction]
#[pyo3(signature = (scores, labels, min_bacc = 0.70))]
fn search_dual_thresholds(py: Python<'_>, scores: Vec<f64>, labels: Vec<String>, min_bacc: f64) -> PyResult<Py<PyAny>> {
    let fit = eval::search_dual_thresholds(&scores, &parse_labels(labels)?, min_bacc).map_err(err)?;
    to_py(py, &fit)
}

/// Evaluation report as a dict. Pass `tau` or both alphas.
#[pyfunction]
#[pyo3(signature = (scores, labels, tau = None, alpha_low = None, alpha_high = None))]
fn evaluate(
    py: Python<'_>,
    scores: Vec<f64>,
    labels: Vec<String>,
    tau: Option<f64>,
    alpha_low: Option<f64>,
    alpha_high: Option<f64>,
) -> PyResult<Py<PyAny>> {
    let thresholds = match (tau, alpha_low, alpha_high) {
        (Some(tau), None, None) => ThresholdConfig::Single { tau },
        (None, Some(alpha_low), Some(alpha_high)) => ThresholdConfig::Dual { alpha_low, alpha_high },
        _ => return Err(PyValueError::new_err("pass either tau or both alpha_low and alpha_high")),
    };
    let report = eval::evaluate(&scores, &parse_labels(labels)?, thresholds).map_err(err)?;
    to_py(py, &report)
}

fn tokens_from(probabilities: Vec<f64>, entropies: Vec<f64>, is_entity: Option<Vec<bool>>) -> PyResult<Vec<TokenScore>> {
    let n = probabilities.len();
    let flags = is_entity.unwrap_or_else(|| vec![false; n]);
    if entropies.len() != n || flags.len() != n {
        return Err(PyValueError::new_err("probabilities, entropies and is_entity differ in length"));
    }
    Ok((0..n)
        .map(|i| TokenScore {
            token_text: String::new(),
            probability: probabilities[i],
            entropy: entropies[i],
            is_entity: flags[i],
        })
        .collect())
}

/// Keys of the 32-member estimator grid, e.g. "probability/all/top_k_3".
#[pyfunction]
fn panel_specs() -> Vec<String> {
    AggregatorSpec::panel().iter().map(|s| s.to_string()).collect()
}

/// One estimator score; raises when the scope has no tokens.
#[pyfunction]
#[pyo3(signature = (spec, probabilities, entropies, is_entity = None))]
fn estimate(spec: &str, probabilities: Vec<f64>, entropies: Vec<f64>, is_entity: Option<Vec<bool>>) -> PyResult<f64> {
    let spec: AggregatorSpec = spec.parse().map_err(err)?;
    aggregate(&tokens_from(probabilities, entropies, is_entity)?, &spec).map_err(err)
}

/// All 32 estimator scores as {spec: score or None}.
#[pyfunction]
#[pyo3(signature = (probabilities, entropies, is_entity = None))]
fn estimator_panel<'py>(
    py: Python<'py>,
    probabilities: Vec<f64>,
    entropies: Vec<f64>,
    is_entity: Option<Vec<bool>>,
) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for e in run_estimator_panel(&tokens_from(probabilities, entropies, is_entity)?).map_err(err)? {
        d.set_item(e.spec.to_string(), e.score)?;
    }
    Ok(d)
}

/// Seeded split of claim dicts (each with at least "id"); returns the id lists.
#[pyfunction]
#[pyo3(signature = (claims, seed = 0, train = 0.7, validation = 0.2, test = 0.1, stratified = false))]
fn split_dataset(
    py: Python<'_>,
    claims: &Bound<'_, PyAny>,
    seed: u64,
    train: f64,
    validation: f64,
    test: f64,
    stratified: bool,
) -> PyResult<Py<PyAny>> {
    let claims: Vec<Claim> = from_py(claims)?;
    let ratios = SplitRatios { train, validation, test };
    let split = claimcheck::split_dataset(&claims, ratios, seed, stratified).map_err(err)?;
    to_py(py, &split)
}

/// Model access: the scripted mock or an OpenAI-compatible endpoint.
#[pyclass(name = "Gateway", module = "claimcheck", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGateway {
    inner: Gateway,
}

#[pymethods]
impl PyGateway {
    /// Mock backend, optionally driven by a JSON Lines script.
    #[staticmethod]
    #[pyo3(signature = (script = None, max_in_flight = 8))]
    fn mock(script: Option<PathBuf>, max_in_flight: usize) -> PyResult<Self> {
        let backend = match script {
            Some(p) => MockBackend::from_script(p).map_err(err)?,
            None => MockBackend::default(),
        };
        let options = GatewayOptions { max_in_flight, ..Default::default() };
        Ok(PyGateway { inner: Gateway::new(backend, options) })
    }

    /// HTTP backend; the API key is read from CLAIMCHECK_API_KEY.
    #[staticmethod]
    #[pyo3(signature = (base_url, model, hidden_states = false, max_in_flight = 8))]
    fn http(base_url: &str, model: &str, hidden_states: bool, max_in_flight: usize) -> Self {
        let mut cfg = HttpConfig::new(base_url, model);
        cfg.hidden_states = hidden_states;
        let options = GatewayOptions { max_in_flight, ..Default::default() };
        PyGateway { inner: Gateway::new(HttpBackend::new(cfg), options) }
    }

    #[getter]
    fn backend_name(&self) -> String {
        self.inner.backend_name().to_string()
    }

    #[pyo3(signature = (prompt, temperature = 0.0, max_tokens = 256, seed = None))]
    fn generate(&self, py: Python<'_>, prompt: &str, temperature: f64, max_tokens: u32, seed: Option<u64>) -> PyResult<String> {
        let mut req = GenerationRequest::user(prompt).temperature(temperature).max_tokens(max_tokens);
        if let Some(s) = seed {
            req = req.seed(s);
        }
        let gw = &self.inner;
        py.detach(|| gw.generate(&req)).map(|r| r.text).map_err(err)
    }

    /// Per-token probability/entropy of `continuation` given `context`.
    fn score_tokens(&self, py: Python<'_>, context: &str, continuation: &str) -> PyResult<Py<PyAny>> {
        let gw = &self.inner;
        let scored = py.detach(|| gw.score_tokens(context, continuation)).map_err(err)?;
        to_py(py, &scored)
    }

    fn count_tokens(&self, text: &str) -> Option<usize> {
        self.inner.count_tokens(text)
    }

    fn __repr__(&self) -> String {
        format!("Gateway(backend={:?})", self.inner.backend_name())
    }
}

/// Splits a response into relevance-filtered claims with anchored spans.
#[pyfunction]
fn decompose(py: Python<'_>, gateway: &PyGateway, prompt_id: &str, prompt: &str, response: &str) -> PyResult<Py<PyAny>> {
    let pipeline = ClaimPipeline::new(gateway.inner.clone(), PipelineConfig::default()).map_err(err)?;
    let record = PromptRecord {
        prompt_id: prompt_id.into(),
        prompt: prompt.into(),
        response: response.into(),
    };
    let spans = py.detach(|| pipeline.process(&record)).map_err(err)?;
    let claims: Vec<&Claim> = spans.iter().map(|s| &s.claim).collect();
    to_py(py, &claims)
}

/// Scores one claim with a named detector; returns P(factual).
#[pyfunction]
#[pyo3(signature = (gateway, detector, claim, prompt = ""))]
fn score_claim(py: Python<'_>, gateway: &PyGateway, detector: &str, claim: &str, prompt: &str) -> PyResult<f64> {
    let kind: DetectorKind = detector.parse().map_err(err)?;
    let det = Detector::new(kind, gateway.inner.clone());
    let c = Claim::new("py", "py", claim);
    py.detach(|| det.score(&c, prompt)).map(|s| s.p_factual).map_err(err)
}

/// Instruction-tuning examples for labeled claim dicts.
#[pyfunction]
#[pyo3(signature = (gateway, claims, include_rationales = true, include_aux_qa = true, include_paraphrase = false, half_data = false, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn build_dataset(
    py: Python<'_>,
    gateway: &PyGateway,
    claims: &Bound<'_, PyAny>,
    include_rationales: bool,
    include_aux_qa: bool,
    include_paraphrase: bool,
    half_data: bool,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let claims: Vec<Claim> = from_py(claims)?;
    let opts = BuildOptions {
        include_rationales,
        include_aux_qa,
        include_paraphrase,
        half_data,
        seed,
    };
    let builder = DatasetBuilder::new(gateway.inner.clone());
    let out = py.detach(|| builder.build_dataset(&claims, &opts)).map_err(err)?;
    to_py(py, &out)
}

/// Two-layer MLP probe over hidden-state embeddings.
#[pyclass(name = "ProbeModel", module = "claimcheck", skip_from_py_object)]
#[derive(Clone)]
struct PyProbe {
    inner: probe::ProbeModel,
    embedding_type: Option<EmbeddingType>,
}

#[pymethods]
impl PyProbe {
    #[new]
    #[pyo3(signature = (input_width, hidden_width = 256, seed = 0))]
    fn new(input_width: usize, hidden_width: usize, seed: u64) -> Self {
        PyProbe {
            inner: probe::ProbeModel::init(input_width, hidden_width, seed),
            embedding_type: None,
        }
    }

    #[getter]
    fn input_width(&self) -> usize {
        self.inner.input_width
    }

    #[getter]
    fn hidden_width(&self) -> usize {
        self.inner.hidden_width
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params()
    }

    /// P(factual) for one embedding.
    fn score(&self, x: Vec<f64>) -> PyResult<f64> {
        probe::probe_score(&self.inner, &x).map_err(err)
    }

    /// Max relative error between backpropagation and central differences.
    fn gradient_check(&self, x: Vec<f64>, factual: bool) -> PyResult<f64> {
        probe::gradient_check(&self.inner, &x, factual).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let meta = probe::ProbeMeta {
            embedding_type: self.embedding_type,
            include_embedding_layer: false,
            validation_bacc: None,
            best_epoch: None,
        };
        probe::save_probe(&self.inner, &meta, WeightEncoding::Text, &path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, meta) = probe::load_probe(&path).map_err(err)?;
        Ok(PyProbe { inner, embedding_type: meta.embedding_type })
    }
}

fn examples(x: Vec<Vec<f64>>, y: Vec<String>) -> PyResult<Vec<(Vec<f64>, Label)>> {
    if x.len() != y.len() {
        return Err(PyValueError::new_err("x and y differ in length"));
    }
    Ok(x.into_iter().zip(parse_labels(y)?).collect())
}

/// Trains a probe; `config` keys follow the run-config [probe.train] table.
/// Returns (model, info dict).
#[pyfunction]
#[pyo3(signature = (x, y, x_val = None, y_val = None, config = None))]
fn train_probe(
    py: Python<'_>,
    x: Vec<Vec<f64>>,
    y: Vec<String>,
    x_val: Option<Vec<Vec<f64>>>,
    y_val: Option<Vec<String>>,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<(PyProbe, Py<PyAny>)> {
    let train = examples(x, y)?;
    let val = examples(x_val.unwrap_or_default(), y_val.unwrap_or_default())?;
    let cfg: TrainConfig = match config {
        Some(c) => from_py(c)?,
        None => TrainConfig::default(),
    };
    let t = py.detach(|| probe::train_probe(&train, &val, &cfg)).map_err(err)?;
    let info = serde_json::json!({
        "best_epoch": t.best_epoch,
        "best_bacc": t.best_bacc,
        "selected_on_train": t.selected_on_train,
        "history": t.history,
    });
    Ok((PyProbe { inner: t.model, embedding_type: None }, to_py(py, &info)?))
}

#[pymodule(name = "claimcheck")]
fn claimcheck_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("ClaimcheckError", py.get_type::<ClaimcheckError>())?;
    m.add("InfeasibleError", py.get_type::<InfeasibleError>())?;
    m.add("BackendError", py.get_type::<BackendError>())?;
    m.add_class::<PyGateway>()?;
    m.add_class::<PyProbe>()?;
    m.add_function(wrap_pyfunction!(bacc, m)?)?;
    m.add_function(wrap_pyfunction!(bacc_unknown, m)?)?;
    m.add_function(wrap_pyfunction!(search_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(search_dual_thresholds, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(panel_specs, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(estimator_panel, m)?)?;
    m.add_function(wrap_pyfunction!(split_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(score_claim, m)?)?;
    m.add_function(wrap_pyfunction!(build_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_probe, m)?)?;
    Ok(())
}
