//! Python bindings for `debias-core`.

use std::path::PathBuf;

use debias_core::dataset::Sample;
use debias_core::fairness::{EvalReport, MetricRow};
use debias_core::influence::{solve_damped_cg, CgConfig};
use debias_core::pipeline::{self, RunConfig};
use debias_core::recmodel::{item_distribution, rank_top_k, sample_loss_and_grad, ModelState};
use debias_core::synth::{generate, write_synth, SynthConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A trained adapter over frozen item embeddings.
#[pyclass(name = "Model", module = "debias", frozen)]
struct PyModel {
    inner: ModelState,
}

impl PyModel {
    fn sample(&self, history: Vec<usize>, target: usize) -> Sample {
        Sample { sample_id: 0, user: 0, history, target, timestamp: 0 }
    }
}

#[pymethods]
impl PyModel {
    /// Seeded Gaussian embeddings with an identity adapter.
    #[new]
    #[pyo3(signature = (item_count, d, reg=0.01, emb_scale=1.0, seed=0))]
    fn new(item_count: usize, d: usize, reg: f64, emb_scale: f64, seed: u64) -> PyResult<Self> {
        Ok(PyModel { inner: ModelState::init(item_count, d, reg, emb_scale, seed).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { inner: ModelState::load(&path).map_err(value_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(value_err)
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }

    #[getter]
    fn item_count(&self) -> usize {
        self.inner.item_count
    }

    #[getter]
    fn reg(&self) -> f64 {
        self.inner.reg
    }

    /// Row-major `d x d` adapter.
    #[getter]
    fn adapter(&self) -> Vec<f64> {
        self.inner.adapter.clone()
    }

    fn with_adapter(&self, adapter: Vec<f64>) -> PyResult<Self> {
        Ok(PyModel { inner: self.inner.with_adapter(adapter).map_err(value_err)? })
    }

    /// `(distances, probabilities)` over all items for a history.
    fn item_distribution(&self, history: Vec<usize>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        item_distribution(&self.inner, &self.sample(history, 0)).map_err(value_err)
    }

    #[pyo3(signature = (history, k, exclude_history=false))]
    fn rank(&self, history: Vec<usize>, k: usize, exclude_history: bool) -> PyResult<Vec<usize>> {
        rank_top_k(&self.inner, &self.sample(history, 0), k, exclude_history).map_err(value_err)
    }

    /// `(loss, gradient)` of one `(history, target)` pair.
    fn loss_and_grad(&self, history: Vec<usize>, target: usize) -> PyResult<(f64, Vec<f64>)> {
        let (l, g) = sample_loss_and_grad(&self.inner, &self.sample(history, target)).map_err(value_err)?;
        Ok((l, g.into_inner()))
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn __repr__(&self) -> String {
        format!("Model(d={}, item_count={}, reg={})", self.inner.d, self.inner.item_count, self.inner.reg)
    }
}

#[pyfunction]
#[pyo3(signature = (hr, fair, tau=5.0))]
fn f_score(hr: f64, fair: f64, tau: f64) -> PyResult<f64> {
    debias_core::fairness::f_score(hr, fair, tau).map_err(value_err)
}

/// Damped CG on a dense symmetric matrix given as rows.
/// Returns `(x, iterations, relative_residual, converged)`.
#[pyfunction]
#[pyo3(signature = (matrix, b, damping=0.0, tol=1e-10, max_iter=1000))]
fn solve_cg(
    matrix: Vec<Vec<f64>>,
    b: Vec<f64>,
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> PyResult<(Vec<f64>, usize, f64, bool)> {
    let n = b.len();
    if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err(format!("matrix must be {n}x{n}")));
    }
    let cfg = CgConfig { damping, tol, max_iter };
    let out = solve_damped_cg(
        |v| Ok(matrix.iter().map(|row| row.iter().zip(v).map(|(a, x)| a * x).sum()).collect()),
        &b,
        &cfg,
    )
    .map_err(value_err)?;
    Ok((out.x.into_inner(), out.iterations, out.residual, out.converged))
}

/// Writes a synthetic planted-bias dataset; returns the two file paths.
#[pyfunction]
#[pyo3(signature = (output_dir, users=1000, items=200, events_per_user=20, seed=0))]
fn generate_synthetic(
    output_dir: PathBuf,
    users: usize,
    items: usize,
    events_per_user: usize,
    seed: u64,
) -> PyResult<(PathBuf, PathBuf)> {
    let cfg = SynthConfig { users, items, events_per_user, seed, ..SynthConfig::default() };
    let files = write_synth(&generate(&cfg).map_err(value_err)?, &output_dir).map_err(value_err)?;
    Ok((files.interactions, files.attributes))
}

fn row_dict<'py>(py: Python<'py>, r: &MetricRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("k", r.k)?;
    d.set_item("hr", r.hr)?;
    d.set_item("ndcg", r.ndcg)?;
    d.set_item("arp", r.arp)?;
    d.set_item("apt", r.apt)?;
    d.set_item("hd", r.hd)?;
    d.set_item("dp", r.dp)?;
    d.set_item("f_pop", r.f_pop)?;
    d.set_item("f_attr", r.f_attr)?;
    Ok(d)
}

fn report_list<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Vec<Bound<'py, PyDict>>> {
    r.rows.iter().map(|row| row_dict(py, row)).collect()
}

/// Runs every stage. `config` is TOML text in the CLI's config format;
/// relative data paths resolve against the working directory.
#[pyfunction]
#[pyo3(signature = (config="", output_dir=None))]
fn run_pipeline<'py>(py: Python<'py>, config: &str, output_dir: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = RunConfig::from_toml_str(config).map_err(value_err)?;
    if let Some(dir) = output_dir {
        cfg.run.output_dir = dir;
    }
    let out = py
        .detach(|| pipeline::run_pipeline(cfg))
        .map_err(|e| PyRuntimeError::new_err(format!("{e} (exit code {})", e.stage.exit_code())))?;
    let d = PyDict::new(py);
    d.set_item("selected", out.selected.clone())?;
    d.set_item("backbone", report_list(py, &out.backbone_metrics)?)?;
    d.set_item("debiased", report_list(py, &out.debiased_metrics)?)?;
    d.set_item("cost_constant", out.cost.c)?;
    d.set_item("backbone_model", Py::new(py, PyModel { inner: out.backbone })?)?;
    d.set_item("debiased_model", Py::new(py, PyModel { inner: out.debiased })?)?;
    Ok(d)
}

#[pymodule]
fn debias(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(f_score, m)?)?;
    m.add_function(wrap_pyfunction!(solve_cg, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
