//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use crcca::rd_solver::default_support;
use crcca::{ExperimentConfig, Matrix, Method, PairedDataset, RdOptions};

type Representations = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn to_py(e: crcca::Error) -> PyErr {
    match e {
        crcca::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<Matrix> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return Err(PyValueError::new_err(format!("{what} is empty")));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != d) {
        return Err(PyValueError::new_err(format!(
            "{what}: row {i} has {} entries, expected {d}",
            rows[i].len()
        )));
    }
    Ok(Matrix::from_fn(n, d, |i, j| rows[i][j]))
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn dataset(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<PairedDataset> {
    PairedDataset::new(matrix(&x, "x")?, matrix(&y, "y")?).map_err(to_py)
}

/// Serializes through JSON into plain Python dicts and lists.
fn to_python<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// A fitted linear, CRCCA or ACE model.
#[pyclass(name = "Model", module = "crcca_py")]
struct PyModel {
    inner: crcca::Model,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind()
    }

    /// Representations `(u, v)` for paired rows.
    fn transform(&self, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<Representations> {
        let (u, v) = self.inner.transform(&dataset(x, y)?).map_err(to_py)?;
        Ok((rows(&u), rows(&v)))
    }

    /// Normalized objective, per-component correlations and, for CRCCA,
    /// cell entropies.
    fn evaluate(&self, py: Python<'_>, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<Py<PyAny>> {
        let metrics = crcca::Metrics::of_model(&self.inner, &dataset(x, y)?).map_err(to_py)?;
        to_python(py, &metrics)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        crcca::save_model(&self.inner, &path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: crcca::load_model(&path).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: crcca::Model::from_json(text).map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Model(kind={:?})", self.inner.kind())
    }
}

/// Fits `method` ("linear", "crcca" or "ace") on paired rows.
#[pyfunction]
#[pyo3(signature = (x, y, method="crcca", dims=2, levels=9, k=70, max_iters=100, tol=1e-5, ridge=0.0))]
#[allow(clippy::too_many_arguments)]
fn fit(
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    method: &str,
    dims: usize,
    levels: usize,
    k: usize,
    max_iters: usize,
    tol: f64,
    ridge: f64,
) -> PyResult<PyModel> {
    let config = ExperimentConfig {
        method: method.parse::<Method>().map_err(to_py)?,
        dims,
        levels: vec![levels],
        k: vec![k],
        max_iters,
        tol,
        ridge,
        ..Default::default()
    };
    let inner = crcca::fit_model(&config, &dataset(x, y)?).map_err(to_py)?;
    Ok(PyModel { inner })
}

/// Quarter-circle benchmark: `(x, y, quadrant labels)`.
#[pyfunction]
#[pyo3(signature = (n, seed=0))]
fn synth(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>) {
    let (data, labels) = crcca::synthgen::generate(n, seed);
    (rows(data.x()), rows(data.y()), labels)
}

/// Mean canonical correlation between paired representations.
#[pyfunction]
fn normalized_objective(u: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> PyResult<f64> {
    crcca::normalized_objective(&matrix(&u, "u")?, &matrix(&v, "v")?).map_err(to_py)
}

/// Rate distortion on finite supports; returns rate, distortion, moments,
/// the eta trace and the reproduction marginal.
#[pyfunction]
#[pyo3(signature = (source, prior, distortion, support=None, points=101, constrained=true))]
fn solve_rd(
    py: Python<'_>,
    source: Vec<Vec<f64>>,
    prior: Vec<f64>,
    distortion: f64,
    support: Option<Vec<Vec<f64>>>,
    points: usize,
    constrained: bool,
) -> PyResult<Py<PyAny>> {
    let source = matrix(&source, "source")?;
    let support = match support {
        Some(s) => matrix(&s, "support")?,
        None => default_support(&source, &prior, points).map_err(to_py)?,
    };
    let opts = RdOptions {
        constrained,
        ..Default::default()
    };
    let sol = crcca::solve_rd(&prior, &source, &support, distortion, &opts).map_err(to_py)?;
    let summary = serde_json::json!({
        "rate_bits": sol.rate_bits,
        "distortion": sol.distortion,
        "mean": sol.mean,
        "second_moment": sol.second_moment,
        "fixed_point_residual": sol.fixed_point_residual,
        "eta_trace": sol.eta_trace,
        "support": rows(&support),
        "marginal": sol.channel.marginal,
    });
    to_python(py, &summary)
}

/// Runs a repeated-split experiment from a JSON config and returns the report.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_json: &str) -> PyResult<Py<PyAny>> {
    let config: ExperimentConfig = serde_json::from_str(config_json)
        .map_err(|e| PyValueError::new_err(format!("config: {e}")))?;
    let report = py.detach(|| crcca::run(&config)).map_err(to_py)?;
    to_python(py, &report)
}

#[pymodule]
fn crcca_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_objective, m)?)?;
    m.add_function(wrap_pyfunction!(solve_rd, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
