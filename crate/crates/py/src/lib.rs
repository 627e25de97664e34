//! Python bindings: similarity and task metrics, the perturbation taxonomy,
//! a scripted mock backend, benchmark building and prompt optimization.
//!
//! Structured results (benchmarks, optimization runs) cross the boundary
//! as JSON strings; load them with `json.loads`.

use std::collections::BTreeMap;
use std::path::Path;

use pertforge::backend::MockBackend;
use pertforge::metrics::{self, RougeVariant};
use pertforge::perturb::{
    self, Category, GuideBook, PerturbConfig, PerturbationCode, SensitivityMatrix,
};
use pertforge::pgo::{self, PgoConfig, Prompt};
use pertforge::tasks::{parse_dataset, Sample, TaskKind, TaskSpec};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_error(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn task_spec(kind: &str, labels: Option<Vec<String>>) -> PyResult<TaskSpec> {
    let spec = match kind.parse::<TaskKind>().map_err(value_error)? {
        TaskKind::Classification => TaskSpec::classification(
            labels.ok_or_else(|| value_error("classification needs labels"))?,
        ),
        TaskKind::Simplification => TaskSpec::simplification(),
        TaskKind::Summarization => TaskSpec::summarization(),
    };
    spec.validate().map_err(value_error)?;
    Ok(spec)
}

fn parse_codes(codes: Option<Vec<String>>) -> PyResult<Option<Vec<PerturbationCode>>> {
    codes
        .map(|list| {
            list.iter()
                .map(|c| c.parse::<PerturbationCode>().map_err(value_error))
                .collect()
        })
        .transpose()
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("result serializes")
}

#[pyfunction]
fn levenshtein(a: &str, b: &str) -> usize {
    metrics::levenshtein(a, b)
}

#[pyfunction]
fn lev_similarity(a: &str, b: &str) -> f64 {
    metrics::lev_similarity(a, b)
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    metrics::tokenize(text)
}

/// `(precision, recall, f1)` for `variant` in `rouge1`, `rouge2`, `rougeL`.
#[pyfunction]
#[pyo3(signature = (candidate, reference, variant = "rouge1"))]
fn rouge(candidate: &str, reference: &str, variant: &str) -> PyResult<(f64, f64, f64)> {
    let variant = match variant.to_ascii_lowercase().as_str() {
        "rouge1" | "rouge-1" => RougeVariant::Rouge1,
        "rouge2" | "rouge-2" => RougeVariant::Rouge2,
        "rougel" | "rouge-l" => RougeVariant::RougeL,
        other => return Err(value_error(format!("unknown ROUGE variant {other:?}"))),
    };
    let s = metrics::rouge(candidate, reference, variant);
    Ok((s.precision, s.recall, s.f1))
}

/// `{"keep", "add", "delete", "overall"}`
#[pyfunction]
fn sari(
    source: &str,
    candidate: &str,
    references: Vec<String>,
) -> PyResult<BTreeMap<&'static str, f64>> {
    let s = metrics::sari(source, candidate, &references).map_err(value_error)?;
    Ok(BTreeMap::from([
        ("keep", s.keep),
        ("add", s.add),
        ("delete", s.delete),
        ("overall", s.overall),
    ]))
}

/// `(category, description, guide)` for a code such as `"C1"`.
#[pyfunction]
fn guide_for(code: &str) -> PyResult<(String, String, String)> {
    let spec = perturb::guide_for(code).map_err(value_error)?;
    Ok((spec.category.to_string(), spec.description, spec.guide))
}

/// Codes the task kind is sensitive to under the default matrix,
/// optionally restricted to one category (`"P1"` or `"P2"`).
#[pyfunction]
#[pyo3(signature = (task, category = None))]
fn sensitive_codes(task: &str, category: Option<&str>) -> PyResult<Vec<String>> {
    let kind = task.parse::<TaskKind>().map_err(value_error)?;
    let matrix = SensitivityMatrix::default();
    let codes = match category {
        Some(c) => matrix.sensitive_in(kind, c.parse::<Category>().map_err(value_error)?),
        None => matrix.sensitive_codes(kind),
    };
    Ok(codes.iter().map(|c| c.as_str().to_owned()).collect())
}

/// Offline backend driven by a JSON rule script.
#[pyclass(name = "MockBackend", frozen)]
struct PyMockBackend {
    inner: MockBackend,
}

#[pymethods]
impl PyMockBackend {
    #[new]
    fn new(script: &str) -> PyResult<Self> {
        Ok(PyMockBackend {
            inner: MockBackend::from_json(script).map_err(value_error)?,
        })
    }

    #[staticmethod]
    fn from_path(path: &str) -> PyResult<Self> {
        Ok(PyMockBackend {
            inner: MockBackend::from_path(Path::new(path)).map_err(value_error)?,
        })
    }

    /// Semantic similarity of two texts under this backend's embedder.
    fn semantic_similarity(&self, a: &str, b: &str) -> PyResult<f64> {
        metrics::semantic_similarity(a, b, &self.inner).map_err(runtime_error)
    }
}

/// Builds perturbed sub-datasets from a JSON-Lines corpus and returns the
/// benchmark as JSON.
#[pyfunction]
#[pyo3(signature = (name, jsonl, task, backend, prompt, labels = None, codes = None, seed = 0, force_all = false))]
#[allow(clippy::too_many_arguments)]
fn build_benchmark(
    py: Python<'_>,
    name: &str,
    jsonl: &str,
    task: &str,
    backend: &PyMockBackend,
    prompt: &str,
    labels: Option<Vec<String>>,
    codes: Option<Vec<String>>,
    seed: u64,
    force_all: bool,
) -> PyResult<String> {
    let spec = task_spec(task, labels)?;
    let dataset = parse_dataset(name, jsonl, &spec).map_err(value_error)?;
    let codes = parse_codes(codes)?.unwrap_or_else(|| PerturbationCode::ALL.to_vec());
    let config = PerturbConfig {
        seed,
        force_all,
        ..PerturbConfig::default()
    };
    let built = py
        .detach(|| {
            perturb::build_benchmark(
                &dataset,
                &GuideBook::default().specs(&codes),
                &SensitivityMatrix::default(),
                &config,
                prompt,
                &backend.inner,
            )
        })
        .map_err(runtime_error)?;
    Ok(to_json(&built))
}

/// Runs prompt optimization and returns the run as JSON.
///
/// `validation` maps each code to a JSON-Lines string of perturbed
/// validation samples; `codes` defaults to its keys.
#[pyfunction]
#[pyo3(signature = (prompt, train, validation, task, backend, labels = None, category = "P1", seed = 0, iterations = 5))]
#[allow(clippy::too_many_arguments)]
fn optimize(
    py: Python<'_>,
    prompt: &str,
    train: &str,
    validation: BTreeMap<String, String>,
    task: &str,
    backend: &PyMockBackend,
    labels: Option<Vec<String>>,
    category: &str,
    seed: u64,
    iterations: u32,
) -> PyResult<String> {
    let spec = task_spec(task, labels)?;
    let category = category.parse::<Category>().map_err(value_error)?;
    let train = parse_dataset("train", train, &spec)
        .map_err(value_error)?
        .samples;
    let mut val: BTreeMap<PerturbationCode, Vec<Sample>> = BTreeMap::new();
    for (code, text) in &validation {
        let code = code.parse::<PerturbationCode>().map_err(value_error)?;
        val.insert(
            code,
            parse_dataset(code.as_str(), text, &spec)
                .map_err(value_error)?
                .samples,
        );
    }
    let codes: Vec<PerturbationCode> = val.keys().copied().collect();
    let config = PgoConfig {
        seed,
        iterations,
        ..PgoConfig::default()
    };
    let run = py
        .detach(|| {
            pgo::optimize(
                &spec,
                category,
                &codes,
                &GuideBook::default().specs(&codes),
                Prompt::initial(prompt),
                &train,
                &val,
                &config,
                &backend.inner,
            )
        })
        .map_err(runtime_error)?;
    Ok(to_json(&run))
}

#[pymodule]
fn pertforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMockBackend>()?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(lev_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(rouge, m)?)?;
    m.add_function(wrap_pyfunction!(sari, m)?)?;
    m.add_function(wrap_pyfunction!(guide_for, m)?)?;
    m.add_function(wrap_pyfunction!(sensitive_codes, m)?)?;
    m.add_function(wrap_pyfunction!(build_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    Ok(())
}
