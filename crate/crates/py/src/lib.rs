//! Python bindings: graphs, mixing matrices, energy arithmetic and full
//! simulation runs.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use gossipgrid::config::RunConfig;
use gossipgrid::energy::{self, TraceDataset};
use gossipgrid::engine::{self, SimulationOutput};
use gossipgrid::learning::ModelVector;
use gossipgrid::metrics::{self, MetricsRecord};
use gossipgrid::runner::{self, RunError};
use gossipgrid::sweep;
use gossipgrid::topology;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn run_err(e: RunError) -> PyErr {
    match e {
        RunError::Config(c) => PyValueError::new_err(c.to_string()),
        RunError::Runtime(m) => PyRuntimeError::new_err(m),
    }
}

fn models_from(rows: Vec<Vec<f64>>) -> Vec<ModelVector> {
    rows.into_iter().map(ModelVector::from).collect()
}

/// Undirected connected communication graph.
#[pyclass(name = "Topology", module = "gossipgrid_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTopology(topology::Topology);

#[pymethods]
impl PyTopology {
    /// Random connected simple `d`-regular graph on `n` nodes.
    #[staticmethod]
    #[pyo3(signature = (n, d, seed=0))]
    fn regular(n: usize, d: usize, seed: u64) -> PyResult<Self> {
        topology::generate_regular(n, d, seed).map(PyTopology).map_err(value_err)
    }

    #[staticmethod]
    fn from_edges(n: usize, edges: Vec<(usize, usize)>) -> PyResult<Self> {
        topology::Topology::from_edges(n, &edges).map(PyTopology).map_err(value_err)
    }

    /// Parses the `n d` header plus `i j` lines format.
    #[staticmethod]
    fn from_edge_list(text: &str) -> PyResult<Self> {
        topology::Topology::from_edge_list(text).map(PyTopology).map_err(value_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    fn degree(&self, node: usize) -> PyResult<usize> {
        self.check(node)?;
        Ok(self.0.degree(node))
    }

    fn neighbors(&self, node: usize) -> PyResult<Vec<usize>> {
        self.check(node)?;
        Ok(self.0.neighbors(node).to_vec())
    }

    /// Edges `(i, j)` with `i < j`, ascending.
    fn edges(&self) -> Vec<(usize, usize)> {
        self.0.edges()
    }

    fn is_connected(&self) -> bool {
        self.0.is_connected()
    }

    fn to_edge_list(&self) -> String {
        self.0.to_edge_list()
    }

    /// Metropolis-Hastings weights for this graph.
    fn mixing_matrix(&self) -> PyMixingMatrix {
        PyMixingMatrix(topology::metropolis_weights(&self.0))
    }

    fn __len__(&self) -> usize {
        self.0.n()
    }

    fn __repr__(&self) -> String {
        format!("Topology(n={}, edges={})", self.0.n(), self.0.edge_count())
    }
}

impl PyTopology {
    fn check(&self, node: usize) -> PyResult<()> {
        if node >= self.0.n() {
            return Err(PyValueError::new_err(format!("node {node} out of range for {} nodes", self.0.n())));
        }
        Ok(())
    }
}

/// Symmetric doubly stochastic weight matrix.
#[pyclass(name = "MixingMatrix", module = "gossipgrid_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMixingMatrix(topology::MixingMatrix);

#[pymethods]
impl PyMixingMatrix {
    /// Validates a dense square matrix given as nested lists.
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(PyValueError::new_err("mixing matrix must be square"));
        }
        topology::MixingMatrix::from_dense(n, rows.concat()).map(PyMixingMatrix).map_err(value_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    fn get(&self, i: usize, j: usize) -> PyResult<f64> {
        if i >= self.0.n() || j >= self.0.n() {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.0.get(i, j))
    }

    fn to_list(&self) -> Vec<Vec<f64>> {
        (0..self.0.n()).map(|i| self.0.row(i).to_vec()).collect()
    }

    /// `W · values`.
    fn apply(&self, values: Vec<f64>) -> PyResult<Vec<f64>> {
        if values.len() != self.0.n() {
            return Err(PyValueError::new_err(format!("expected {} values, got {}", self.0.n(), values.len())));
        }
        Ok(self.0.apply(&values))
    }

    fn second_eigenvalue_modulus(&self) -> PyResult<f64> {
        topology::second_eigenvalue_modulus(&self.0).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!("MixingMatrix(n={})", self.0.n())
    }
}

/// One device: per-round training energy (mWh) and budget in rounds.
#[pyclass(name = "DeviceProfile", module = "gossipgrid_py", frozen, skip_from_py_object, get_all)]
#[derive(Clone)]
struct PyDeviceProfile {
    name: String,
    per_round_mwh: f64,
    budget_rounds: u64,
}

#[pymethods]
impl PyDeviceProfile {
    #[new]
    fn new(name: String, per_round_mwh: f64, budget_rounds: u64) -> PyResult<Self> {
        energy::DeviceProfile::new(name, per_round_mwh, budget_rounds).map(Self::from).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("DeviceProfile({:?}, {} mWh, {} rounds)", self.name, self.per_round_mwh, self.budget_rounds)
    }
}

impl From<energy::DeviceProfile> for PyDeviceProfile {
    fn from(p: energy::DeviceProfile) -> Self {
        PyDeviceProfile { name: p.name, per_round_mwh: p.per_round_mwh, budget_rounds: p.budget_rounds }
    }
}

fn dataset(name: &str) -> PyResult<TraceDataset> {
    name.parse().map_err(value_err)
}

/// Profiles of the shipped four-phone trace for `cifar10` or `femnist`.
#[pyfunction]
#[pyo3(signature = (dataset_name="cifar10"))]
fn builtin_trace(dataset_name: &str) -> PyResult<Vec<PyDeviceProfile>> {
    Ok(energy::builtin_trace(dataset(dataset_name)?).into_iter().map(Into::into).collect())
}

#[pyfunction]
#[pyo3(signature = (path, dataset_name="cifar10"))]
fn load_traces(path: std::path::PathBuf, dataset_name: &str) -> PyResult<Vec<PyDeviceProfile>> {
    Ok(energy::load_traces(&path, dataset(dataset_name)?).map_err(value_err)?.into_iter().map(Into::into).collect())
}

/// Energy in mWh of drawing `power_w` for `duration_s`.
#[pyfunction]
fn round_energy(power_w: f64, duration_s: f64) -> PyResult<f64> {
    energy::round_energy(power_w, duration_s).map_err(value_err)
}

#[pyfunction]
fn trace_from_benchmark(
    power_w: f64,
    inference_s_per_sample: f64,
    batch_size: u64,
    local_steps: u64,
    param_ratio: f64,
) -> PyResult<f64> {
    energy::trace_from_benchmark(power_w, inference_s_per_sample, batch_size, local_steps, param_ratio)
        .map_err(value_err)
}

#[pyfunction]
fn budget_from_battery(capacity_wh: f64, fraction: f64, per_round_mwh: f64) -> PyResult<u64> {
    energy::budget_from_battery(capacity_wh, fraction, per_round_mwh).map_err(value_err)
}

#[pyfunction]
fn planned_training_rounds(gamma_train: u64, gamma_sync: u64, total_rounds: u64) -> PyResult<u64> {
    if gamma_train == 0 {
        return Err(PyValueError::new_err("gamma_train must be at least 1"));
    }
    Ok(energy::planned_training_rounds(gamma_train, gamma_sync, total_rounds))
}

#[pyfunction]
fn training_probability(budget_rounds: u64, training_rounds: u64) -> PyResult<f64> {
    energy::training_probability(budget_rounds, training_rounds).map_err(value_err)
}

/// `Σ_j W[j][i] · models[j]`.
#[pyfunction]
fn gossip_aggregate(models: Vec<Vec<f64>>, mixing: &PyMixingMatrix, node: usize) -> PyResult<Vec<f64>> {
    if node >= models.len() {
        return Err(PyValueError::new_err(format!("node {node} out of range")));
    }
    engine::gossip_aggregate(&models_from(models), &mixing.0, node).map(ModelVector::into_inner).map_err(value_err)
}

#[pyfunction]
fn all_reduce(models: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    engine::all_reduce(&models_from(models)).map(ModelVector::into_inner).map_err(value_err)
}

#[pyfunction]
fn consensus_distance(models: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::consensus_distance(&models_from(models)).map_err(value_err)
}

/// Outcome of one simulation.
#[pyclass(name = "RunResult", module = "gossipgrid_py", frozen, skip_from_py_object)]
struct PyRunResult {
    label: String,
    out: SimulationOutput,
}

fn record_dict<'py>(py: Python<'py>, r: &MetricsRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("round", r.round)?;
    d.set_item("mean_accuracy", r.mean_accuracy)?;
    d.set_item("std_accuracy", r.std_accuracy)?;
    d.set_item("mean_loss", r.mean_loss)?;
    d.set_item("consensus_distance", r.consensus_distance)?;
    d.set_item("cumulative_energy_wh", r.cumulative_energy_wh)?;
    d.set_item("algorithm", &r.algorithm)?;
    d.set_item("phase", r.phase.as_str())?;
    Ok(d)
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn label(&self) -> &str {
        &self.label
    }

    #[getter]
    fn total_energy_wh(&self) -> f64 {
        self.out.ledger.total_wh()
    }

    /// Executed training rounds per node.
    #[getter]
    fn train_rounds(&self) -> Vec<u64> {
        self.out.ledger.train_rounds().to_vec()
    }

    #[getter]
    fn final_mean_accuracy(&self) -> Option<f64> {
        self.out.records.last().and_then(|r| r.mean_accuracy)
    }

    /// Evaluation snapshots as dictionaries.
    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        let rows = self.out.records.iter().map(|r| record_dict(py, r)).collect::<PyResult<Vec<_>>>()?;
        PyList::new(py, rows)
    }

    /// Final model of every node; empty for energy-only runs.
    fn models(&self) -> Vec<Vec<f64>> {
        self.out.models.iter().map(|m| m.as_slice().to_vec()).collect()
    }

    fn metrics_csv(&self) -> String {
        metrics::metrics_csv(&self.out.records, &self.out.ledger)
    }

    fn __repr__(&self) -> String {
        format!("RunResult({:?}, {:.2} Wh, {} records)", self.label, self.out.ledger.total_wh(), self.out.records.len())
    }
}

fn build_config(config: Option<&Bound<'_, PyDict>>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<RunConfig> {
    let mut c = RunConfig::default();
    for d in [config, overrides].into_iter().flatten() {
        for (k, v) in d.iter() {
            if v.is_none() {
                continue;
            }
            let key: String = k.extract()?;
            c.set(&key, &v.str()?.to_string()).map_err(value_err)?;
        }
    }
    c.validate().map_err(value_err)?;
    Ok(c)
}

/// Runs one simulation. Keys are the same as the command-line flags and
/// config file (`n`, `degree`, `algorithm`, `rounds`, ...); keyword
/// arguments override entries of `config`.
#[pyfunction]
#[pyo3(signature = (config=None, **overrides))]
fn run(
    py: Python<'_>,
    config: Option<&Bound<'_, PyDict>>,
    overrides: Option<&Bound<'_, PyDict>>,
) -> PyResult<PyRunResult> {
    let c = build_config(config, overrides)?;
    let out = py.detach(|| runner::execute(&c)).map_err(run_err)?;
    Ok(PyRunResult { label: c.effective_label(), out })
}

/// Grid search over block lengths; returns `{"cells": [...], "best": ...}`.
#[pyfunction]
#[pyo3(signature = (gamma_train, gamma_sync, config=None, **overrides))]
fn grid_search<'py>(
    py: Python<'py>,
    gamma_train: Vec<u64>,
    gamma_sync: Vec<u64>,
    config: Option<&Bound<'py, PyDict>>,
    overrides: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyDict>> {
    let c = build_config(config, overrides)?;
    let result = py.detach(|| sweep::run_sweep(&c, &gamma_train, &gamma_sync)).map_err(run_err)?;
    let cell = |cell: &sweep::SweepCell| -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        d.set_item("gamma_train", cell.gamma_train)?;
        d.set_item("gamma_sync", cell.gamma_sync)?;
        d.set_item("accuracy", cell.accuracy)?;
        d.set_item("energy_wh", cell.energy_wh)?;
        d.set_item("error", cell.error.as_deref())?;
        Ok(d)
    };
    let out = PyDict::new(py);
    out.set_item("cells", result.cells.iter().map(cell).collect::<PyResult<Vec<_>>>()?)?;
    out.set_item("best", sweep::select_best(&result.cells).map(cell).transpose()?)?;
    out.set_item("accuracy_csv", sweep::accuracy_matrix_csv(&result))?;
    out.set_item("energy_csv", sweep::energy_matrix_csv(&result))?;
    Ok(out)
}

#[pymodule]
fn gossipgrid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyTopology>()?;
    m.add_class::<PyMixingMatrix>()?;
    m.add_class::<PyDeviceProfile>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(builtin_trace, m)?)?;
    m.add_function(wrap_pyfunction!(load_traces, m)?)?;
    m.add_function(wrap_pyfunction!(round_energy, m)?)?;
    m.add_function(wrap_pyfunction!(trace_from_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(budget_from_battery, m)?)?;
    m.add_function(wrap_pyfunction!(planned_training_rounds, m)?)?;
    m.add_function(wrap_pyfunction!(training_probability, m)?)?;
    m.add_function(wrap_pyfunction!(gossip_aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(all_reduce, m)?)?;
    m.add_function(wrap_pyfunction!(consensus_distance, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(grid_search, m)?)?;
    Ok(())
}
