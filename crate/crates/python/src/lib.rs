//! Python bindings for markovid. Matrices cross the boundary as nested lists of floats
//! (row-major); reports come back as plain dictionaries.

use std::fs;

use markovid::bounds::{bound_report, BoundInputs};
use markovid::estimators::{estimate as run_estimate, Method};
use markovid::extraction::{extract as run_extract, ExtractionMethod};
use markovid::harness::{self, ExperimentConfig};
use markovid::model::{markov_input, markov_noise, predictor_markov, to_predictor, StateSpaceModel};
use markovid::rollout::{simulate as run_simulate, PredictorMode, RolloutDataset, SimConfig};
use markovid::Error;
use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyOverflowError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

create_exception!(pymarkovid, NumericalError, PyRuntimeError, "Ill-conditioned or rank-deficient estimation problem.");

fn to_py_err(e: Error) -> PyErr {
    match &e {
        Error::Overflow { .. } => PyOverflowError::new_err(e.to_string()),
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        e if e.is_numerical() => NumericalError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

type Rows = Vec<Vec<f64>>;

pub fn to_rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(name: &str, rows: &Rows) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err(format!("{name} has ragged rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Linear system in innovations form.
#[pyclass(name = "StateSpaceModel", module = "pymarkovid", from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    pub inner: StateSpaceModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (a, b, c, d, k))]
    fn new(a: Rows, b: Rows, c: Rows, d: Rows, k: Rows) -> PyResult<Self> {
        let c_m = from_rows("C", &c)?;
        let b_m = from_rows("B", &b)?;
        let d_m = if d.is_empty() {
            DMatrix::zeros(c_m.nrows(), b_m.ncols())
        } else {
            from_rows("D", &d)?
        };
        let inner = StateSpaceModel::new(from_rows("A", &a)?, b_m, c_m, d_m, from_rows("K", &k)?).map_err(to_py_err)?;
        Ok(Self { inner })
    }

    /// `siso-paper` or `mimo-paper`.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: harness::preset(name).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: StateSpaceModel::from_json_str(text).map_err(to_py_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json_string().map_err(to_py_err)
    }

    #[getter]
    fn n_x(&self) -> usize {
        self.inner.n_x()
    }
    #[getter]
    fn n_u(&self) -> usize {
        self.inner.n_u()
    }
    #[getter]
    fn n_y(&self) -> usize {
        self.inner.n_y()
    }
    #[getter]
    fn a(&self) -> Rows {
        to_rows(self.inner.a())
    }
    #[getter]
    fn b(&self) -> Rows {
        to_rows(self.inner.b())
    }
    #[getter]
    fn c(&self) -> Rows {
        to_rows(self.inner.c())
    }
    #[getter]
    fn d(&self) -> Rows {
        to_rows(self.inner.d())
    }
    #[getter]
    fn k(&self) -> Rows {
        to_rows(self.inner.k())
    }

    /// `[D, CB, CAB, ...]` as one block row.
    fn markov_input(&self, t: usize) -> PyResult<Rows> {
        Ok(to_rows(&markov_input(&self.inner, t).map_err(to_py_err)?.to_row()))
    }

    /// `[I, CK, CAK, ...]` as one block row.
    fn markov_noise(&self, t: usize) -> PyResult<Rows> {
        Ok(to_rows(&markov_noise(&self.inner, t).map_err(to_py_err)?.to_row()))
    }

    /// `(G_K, H_K)` block rows, oldest lag first.
    fn predictor_markov(&self, t: usize) -> PyResult<(Rows, Rows)> {
        let (g, h) = predictor_markov(&to_predictor(&self.inner), t).map_err(to_py_err)?;
        Ok((to_rows(&g.to_row()), to_rows(&h.to_row())))
    }

    fn __repr__(&self) -> String {
        format!(
            "StateSpaceModel(n_x={}, n_u={}, n_y={})",
            self.inner.n_x(),
            self.inner.n_u(),
            self.inner.n_y()
        )
    }
}

/// Rollouts of equal length; signals are `(dim x T)` nested lists.
#[pyclass(name = "Dataset", module = "pymarkovid", from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    pub inner: RolloutDataset,
}

impl PyDataset {
    fn rollout(&self, i: usize) -> PyResult<&markovid::rollout::Rollout> {
        self.inner
            .rollouts()
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("rollout {i} out of range")))
    }
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn n_rollouts(&self) -> usize {
        self.inner.n_rollouts()
    }
    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }
    #[getter]
    fn n_u(&self) -> usize {
        self.inner.n_u()
    }
    #[getter]
    fn n_y(&self) -> usize {
        self.inner.n_y()
    }

    fn inputs(&self, i: usize) -> PyResult<Rows> {
        Ok(to_rows(&self.rollout(i)?.inputs))
    }

    fn outputs(&self, i: usize) -> PyResult<Rows> {
        Ok(to_rows(&self.rollout(i)?.outputs))
    }

    fn innovations(&self, i: usize) -> PyResult<Option<Rows>> {
        Ok(self.rollout(i)?.innovations.as_ref().map(to_rows))
    }

    #[pyo3(signature = (path, include_innovations = true))]
    fn to_csv(&self, path: &str, include_innovations: bool) -> PyResult<()> {
        let file = fs::File::create(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        self.inner.write_csv(file, include_innovations).map_err(to_py_err)
    }

    #[staticmethod]
    fn from_csv(path: &str) -> PyResult<Self> {
        let file = fs::File::open(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self {
            inner: RolloutDataset::read_csv(file).map_err(to_py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Dataset(N={}, T={})", self.inner.n_rollouts(), self.inner.horizon())
    }
}

/// Simulates `n` zero-initial-state rollouts of length `t`.
#[pyfunction]
#[pyo3(signature = (system, n, t, sigma_u = 1.0, sigma_e = 1.0, seed = 0))]
fn simulate(py: Python<'_>, system: PyRef<'_, PyModel>, n: usize, t: usize, sigma_u: f64, sigma_e: f64, seed: u64) -> PyResult<PyDataset> {
    let cfg = SimConfig {
        n_rollouts: n,
        horizon: t,
        sigma_u,
        sigma_e,
        seed,
    };
    let sys = system.inner.clone();
    let inner = py.detach(move || run_simulate(&sys, &cfg)).map_err(to_py_err)?;
    Ok(PyDataset { inner })
}

/// Runs one estimator and returns its report. `method` is one of `ols`, `wls-optimal`,
/// `wls-estimated-recursive`, `wls-estimated-hokalman`.
#[pyfunction]
#[pyo3(signature = (dataset, method = "ols", system = None, predictor_mode = "strict", nx = None))]
fn estimate<'py>(
    py: Python<'py>,
    dataset: PyRef<'_, PyDataset>,
    method: &str,
    system: Option<PyRef<'_, PyModel>>,
    predictor_mode: &str,
    nx: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let method: Method = method.parse().map_err(to_py_err)?;
    let mode: PredictorMode = predictor_mode.parse().map_err(to_py_err)?;
    let sys = system.map(|s| s.inner.clone());
    let data = dataset.inner.clone();
    let json = py.detach(move || -> markovid::Result<String> {
        let n_x = nx.or(sys.as_ref().map(|s| s.n_x()));
        let mut report = run_estimate(&data, method, sys.as_ref(), mode, n_x)?;
        if let Some(s) = &sys {
            report = report.with_truth(&markov_input(s, data.horizon())?.to_row());
        }
        Ok(serde_json::to_string(&report.to_json())?)
    });
    json_to_py(py, &json.map_err(to_py_err)?)
}

/// Bound constants and values for OLS and optimally weighted least squares.
#[pyfunction]
#[pyo3(signature = (n_u, n_y, t, delta, h_norm, n, sigma_u = 1.0, sigma_e = 1.0))]
#[allow(clippy::too_many_arguments)]
fn bounds<'py>(
    py: Python<'py>,
    n_u: usize,
    n_y: usize,
    t: usize,
    delta: f64,
    h_norm: f64,
    n: usize,
    sigma_u: f64,
    sigma_e: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let report = bound_report(&BoundInputs {
        n_u,
        n_y,
        horizon: t,
        delta,
        h_norm,
        sigma_u,
        sigma_e,
        n_rollouts: n,
    })
    .map_err(to_py_err)?;
    json_to_py(py, &to_json(&report)?)
}

/// Recovers `[CK, CAK, ...]` from predictor blocks `[CK, C A_K K, ...]` (newest lag first).
#[pyfunction]
#[pyo3(signature = (predictor_blocks, method = "recursive", nx = None, count = None))]
fn extract(predictor_blocks: Vec<Rows>, method: &str, nx: Option<usize>, count: Option<usize>) -> PyResult<Vec<Rows>> {
    let method: ExtractionMethod = method.parse().map_err(to_py_err)?;
    let blocks = predictor_blocks
        .iter()
        .enumerate()
        .map(|(i, b)| from_rows(&format!("block {i}"), b))
        .collect::<PyResult<Vec<_>>>()?;
    let count = count.unwrap_or(blocks.len());
    let (out, _) = run_extract(method, &blocks, nx, count).map_err(to_py_err)?;
    Ok(out.iter().map(to_rows).collect())
}

/// Runs a Monte Carlo experiment from a JSON config string; returns the full report.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ExperimentConfig::from_json_str(config).map_err(to_py_err)?;
    let report = py.detach(move || harness::run_experiment(&cfg)).map_err(to_py_err)?;
    json_to_py(py, &to_json(&report)?)
}

/// Log-log least-squares slope of `(x, error)` pairs.
#[pyfunction]
fn fit_rate<'py>(py: Python<'py>, points: Vec<(f64, f64)>) -> PyResult<Bound<'py, PyAny>> {
    let fit = harness::fit_rate(&points).map_err(to_py_err)?;
    json_to_py(py, &to_json(&fit)?)
}

#[pymodule]
pub fn pymarkovid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(bounds, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(fit_rate, m)?)?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    Ok(())
}
