//! Python bindings. Structured values cross the boundary as plain dicts and
//! lists, converted through their JSON form.

use std::path::PathBuf;

use manetsim::agent::AgentSpec;
use manetsim::metrics::{compute_metrics, replay_metrics, NodeSummary};
use manetsim::model::{AgentId, Position};
use manetsim::scenario;
use manetsim::world::ParamChange;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py(py: Python<'_>, value: &impl Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

/// A validated scenario.
#[pyclass(name = "Scenario", module = "manetsim", from_py_object)]
#[derive(Clone)]
pub struct PyScenario {
    inner: scenario::Scenario,
}

#[pymethods]
impl PyScenario {
    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn protocol(&self) -> String {
        format!("{:?}", self.inner.protocol).to_uppercase()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.params.seed
    }

    fn __len__(&self) -> usize {
        self.inner.agents.len()
    }

    fn with_seed(&self, seed: u64) -> Self {
        PyScenario { inner: self.inner.clone().with_seed(seed) }
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    fn build_world(&self) -> PyResult<PyWorld> {
        Ok(PyWorld { inner: self.inner.build_world().map_err(err)? })
    }

    /// Runs to quiescence, writes the output files and returns the metrics.
    fn run_headless(&self, py: Python<'_>, out_dir: PathBuf) -> PyResult<Py<PyAny>> {
        let report = manetsim::headless::run_headless(&self.inner, &out_dir).map_err(err)?;
        to_py(py, &report.metrics)
    }

    fn __repr__(&self) -> String {
        format!("Scenario(name={:?}, agents={})", self.inner.name, self.inner.agents.len())
    }
}

/// A deterministic simulation world.
#[pyclass(name = "World", module = "manetsim", unsendable)]
pub struct PyWorld {
    inner: manetsim::world::World,
}

#[pymethods]
impl PyWorld {
    #[getter]
    fn now(&self) -> u64 {
        self.inner.now()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<u32> {
        self.inner.ids().into_iter().map(|id| id.0).collect()
    }

    fn tick(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let report = self.inner.tick().map_err(err)?;
        to_py(py, &report)
    }

    /// Ticks until `window` quiet ticks pass or `max_ticks` elapse.
    fn run(&mut self, py: Python<'_>, max_ticks: u64, window: u64) -> PyResult<Py<PyAny>> {
        let outcome = self.inner.run(max_ticks, window).map_err(err)?;
        to_py(py, &outcome)
    }

    fn is_quiescent(&self, window: u64) -> bool {
        self.inner.is_quiescent(window)
    }

    fn state(&self, py: Python<'_>, uid: u32) -> PyResult<Py<PyAny>> {
        to_py(py, self.inner.state(AgentId(uid)).map_err(err)?)
    }

    fn states(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.states())
    }

    fn edges(&self) -> Vec<(u32, u32)> {
        self.inner.topology().edges().into_iter().map(|(a, b)| (a.0, b.0)).collect()
    }

    #[pyo3(signature = (uid, x, y, kind=None, mobility=None, resources=None))]
    fn spawn(
        &mut self,
        uid: u32,
        x: f64,
        y: f64,
        kind: Option<String>,
        mobility: Option<&Bound<'_, PyAny>>,
        resources: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<u32> {
        let mut spec = AgentSpec::new(uid, Position::new(x, y));
        if let Some(k) = kind {
            spec.kind = k;
        }
        if let Some(m) = mobility {
            spec.mobility = from_py(m)?;
        }
        if let Some(r) = resources {
            spec.resources = from_py(r)?;
        }
        Ok(self.inner.spawn_agent(spec).map_err(err)?.0)
    }

    fn despawn(&mut self, uid: u32) -> PyResult<()> {
        self.inner.despawn_agent(AgentId(uid)).map_err(err)
    }

    fn move_agent(&mut self, uid: u32, x: f64, y: f64) -> PyResult<()> {
        self.inner.move_agent(AgentId(uid), Position::new(x, y)).map_err(err)
    }

    fn set_param(&mut self, key: &str, value: f64) -> PyResult<()> {
        let change = ParamChange::parse(key, value).map_err(err)?;
        self.inner.set_param(change).map_err(err)
    }

    fn events(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.log().events())
    }

    fn events_jsonl(&self) -> String {
        self.inner.log().to_jsonl()
    }

    fn metrics(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let nodes: Vec<NodeSummary> = self.inner.states().iter().map(NodeSummary::from).collect();
        to_py(py, &compute_metrics(&self.inner.log().events(), &nodes, None))
    }
}

#[pyfunction]
fn load_scenario(path: PathBuf) -> PyResult<PyScenario> {
    Ok(PyScenario { inner: scenario::load_scenario(&path).map_err(err)? })
}

#[pyfunction]
#[pyo3(signature = (text, origin="<string>"))]
fn parse_scenario(text: &str, origin: &str) -> PyResult<PyScenario> {
    Ok(PyScenario { inner: scenario::parse_scenario(text, origin).map_err(err)? })
}

/// Validates a wire record given as a dict and returns its canonical bytes.
#[pyfunction]
fn encode_message<'py>(py: Python<'py>, record: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyBytes>> {
    let text: String = py.import("json")?.call_method1("dumps", (record,))?.extract()?;
    let msg = manetsim::wire::decode_message(text.as_bytes()).map_err(err)?;
    Ok(PyBytes::new(py, &manetsim::wire::encode_message(&msg)))
}

/// Decodes canonical bytes into a wire record dict.
#[pyfunction]
fn decode_message(py: Python<'_>, data: &[u8]) -> PyResult<Py<PyAny>> {
    let msg = manetsim::wire::decode_message(data).map_err(err)?;
    let text = String::from_utf8(manetsim::wire::encode_message(&msg)).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Recomputes run metrics from an event log in line-delimited JSON.
#[pyfunction]
fn replay(py: Python<'_>, jsonl: &str) -> PyResult<Py<PyAny>> {
    let log = manetsim::events::parse_jsonl(jsonl).map_err(err)?;
    to_py(py, &replay_metrics(&log))
}

#[pymodule]
#[pyo3(name = "manetsim")]
fn manetsim_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyWorld>()?;
    m.add_function(wrap_pyfunction!(load_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(parse_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(encode_message, m)?)?;
    m.add_function(wrap_pyfunction!(decode_message, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    Ok(())
}
