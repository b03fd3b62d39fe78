//! Python bindings: run experiments, generate datasets and re-evaluate
//! checkpoints from TOML config text. Reports come back as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use segfed::cli::{evaluate_checkpoint, execute_run, parse_config, ExperimentConfig};
use segfed::synthdata::write_dataset_dir;
use segfed::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(msg) => PyValueError::new_err(msg),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn config(source: &str, overrides: Vec<String>) -> PyResult<ExperimentConfig> {
    let cfg = parse_config(source, "<config>", &overrides).map_err(to_py)?;
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// The default experiment config as TOML text.
#[pyfunction]
fn default_config() -> PyResult<String> {
    ExperimentConfig::default().to_toml().map_err(to_py)
}

/// Validates config text (with `section.key=value` overrides) and returns
/// the resolved config as TOML.
#[pyfunction]
#[pyo3(signature = (source, overrides = Vec::new()))]
fn resolve_config(source: &str, overrides: Vec<String>) -> PyResult<String> {
    config(source, overrides)?.to_toml().map_err(to_py)
}

/// Trains one run into `out` and returns its final report, plus the
/// `rollbacks` count and `best_round`.
#[pyfunction]
#[pyo3(signature = (source, out, overrides = Vec::new(), workers = 1))]
fn run(py: Python<'_>, source: &str, out: PathBuf, overrides: Vec<String>, workers: usize) -> PyResult<Py<PyAny>> {
    let cfg = config(source, overrides)?;
    let art = py.detach(|| execute_run(&cfg, Some(source), &out, workers, true)).map_err(to_py)?;
    let report = json_to_py(py, &art.report)?;
    let dict = report.bind(py);
    dict.set_item("rollbacks", art.rollbacks)?;
    dict.set_item("best_round", art.best_round)?;
    dict.set_item("output_dir", art.dir)?;
    Ok(report)
}

/// Writes the configured federated dataset to `out`.
#[pyfunction]
#[pyo3(signature = (source, out, overrides = Vec::new()))]
fn gen_data(py: Python<'_>, source: &str, out: PathBuf, overrides: Vec<String>) -> PyResult<()> {
    let cfg = config(source, overrides)?;
    py.detach(|| {
        let (data, specs) = cfg.build_data()?;
        write_dataset_dir(&out, &data, &specs)
    })
    .map_err(to_py)
}

/// Evaluates a checkpoint directory on a dataset directory.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, workers = 1))]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, data: PathBuf, workers: usize) -> PyResult<Py<PyAny>> {
    let report = py.detach(|| evaluate_checkpoint(&checkpoint, &data, workers)).map_err(to_py)?;
    json_to_py(py, &report)
}

#[pymodule]
fn segfed_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
