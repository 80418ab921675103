//! Python bindings. Structured values cross the boundary as plain Python
//! objects decoded from JSON.

use std::path::PathBuf;

use adaptsim::engine::Mode;
use adaptsim::harness::{self, RunOptions};
use adaptsim::rainbow::{IndicationEvent, SequencePattern};
use adaptsim::store::{self, Kind, Resource};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyList;
use serde::Serialize;
use serde_json::Value;

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl ToString) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn options(seed: u64, mode: &str, until: Option<i64>, controllers: Option<Vec<String>>) -> PyResult<RunOptions> {
    let mode: Mode = mode.parse().map_err(value_err)?;
    Ok(RunOptions {
        seed,
        mode,
        until_seconds: until,
        controllers,
    })
}

/// A parsed and checked scenario.
#[pyclass(module = "adaptsim_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Scenario {
    inner: harness::Scenario,
}

#[pymethods]
impl Scenario {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = harness::Scenario::load(&path).map_err(value_err)?;
        Ok(Scenario { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (text, origin = "<string>"))]
    fn parse(text: &str, origin: &str) -> PyResult<Self> {
        let inner = harness::Scenario::parse(text, origin).map_err(value_err)?;
        Ok(Scenario { inner })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn start(&self) -> i64 {
        self.inner.start_epoch_seconds
    }

    #[getter]
    fn end(&self) -> i64 {
        self.inner.end()
    }

    #[getter]
    fn controllers(&self) -> Vec<&'static str> {
        self.inner.controllers.configured()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Scenario({:?})", self.inner.name)
    }
}

/// A running simulation that can be advanced step by step. Controllers are
/// boxed trait objects, so instances stay on the thread that created them.
#[pyclass(module = "adaptsim_py", unsendable)]
struct Simulation {
    inner: harness::Simulation,
}

#[pymethods]
impl Simulation {
    #[new]
    #[pyo3(signature = (scenario, seed = 1, mode = "level", until = None, controllers = None))]
    fn new(
        scenario: &Scenario,
        seed: u64,
        mode: &str,
        until: Option<i64>,
        controllers: Option<Vec<String>>,
    ) -> PyResult<Self> {
        let options = options(seed, mode, until, controllers)?;
        let inner = harness::Simulation::new(scenario.inner.clone(), options).map_err(value_err)?;
        Ok(Simulation { inner })
    }

    #[getter]
    fn now(&self) -> i64 {
        self.inner.now()
    }

    #[getter]
    fn end(&self) -> i64 {
        self.inner.end()
    }

    #[getter]
    fn goal_met(&self) -> bool {
        self.inner.goal_met()
    }

    /// Advances to the absolute epoch second `t`, capped at the horizon.
    fn run_until(&mut self, t: i64) {
        self.inner.run_until(t);
    }

    fn run(&mut self) {
        self.inner.run();
    }

    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.records())
    }

    fn report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.report())
    }

    fn final_state<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.final_state())
    }

    fn idempotence_probe<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.idempotence_probe())
    }

    fn trace_digest(&self) -> String {
        adaptsim::trace::digest(self.inner.records())
    }

    /// Writes trace.jsonl and report.json into `out`.
    fn write_to(&self, out: PathBuf) -> PyResult<()> {
        self.inner.clone().finish().write_to(&out).map_err(runtime_err)
    }
}

/// The versioned resource store on its own.
#[pyclass(module = "adaptsim_py")]
struct Store {
    inner: store::Store,
}

fn kind(name: &str) -> PyResult<Kind> {
    name.parse().map_err(value_err)
}

#[pymethods]
impl Store {
    #[new]
    fn new() -> Self {
        Store {
            inner: store::Store::new(),
        }
    }

    /// Returns the new resource version.
    fn create(&mut self, kind_name: &str, name: &str, spec: &Bound<'_, PyAny>) -> PyResult<u64> {
        let resource = Resource::new(kind(kind_name)?, name, from_py(spec)?);
        let outcome = self.inner.create(resource).map_err(value_err)?;
        Ok(outcome.new_resource_version.unwrap_or_default())
    }

    fn get<'py>(&self, py: Python<'py>, kind_name: &str, name: &str) -> PyResult<Bound<'py, PyAny>> {
        let r = self
            .inner
            .get(kind(kind_name)?, store::DEFAULT_NAMESPACE, name)
            .map_err(value_err)?;
        to_py(py, &r)
    }

    /// Compare-and-swap on the spec. Returns the new version, or None on a
    /// conflict.
    fn update_spec(
        &mut self,
        kind_name: &str,
        name: &str,
        spec: &Bound<'_, PyAny>,
        expected_version: u64,
    ) -> PyResult<Option<u64>> {
        let mut r = self
            .inner
            .get(kind(kind_name)?, store::DEFAULT_NAMESPACE, name)
            .map_err(value_err)?;
        r.spec = from_py(spec)?;
        let outcome = self.inner.update_spec(&r, expected_version).map_err(value_err)?;
        Ok(outcome.new_resource_version.filter(|_| outcome.accepted))
    }

    fn delete(&mut self, kind_name: &str, name: &str) -> PyResult<()> {
        self.inner
            .delete(kind(kind_name)?, store::DEFAULT_NAMESPACE, name)
            .map_err(value_err)
    }

    #[getter]
    fn write_count(&self) -> u64 {
        self.inner.write_count()
    }
}

/// Ordered event-sequence matcher.
#[pyclass(module = "adaptsim_py")]
struct Matcher {
    inner: adaptsim::rainbow::Matcher,
}

#[pymethods]
impl Matcher {
    /// `pattern` uses the same shape as a rule file entry: name, symbols,
    /// perSubject, withinSeconds.
    #[new]
    fn new(pattern: &Bound<'_, PyAny>) -> PyResult<Self> {
        let pattern: SequencePattern = serde_json::from_value(from_py(pattern)?).map_err(value_err)?;
        Ok(Matcher {
            inner: adaptsim::rainbow::Matcher::new(pattern),
        })
    }

    /// Returns the matched events when `symbol` completes the pattern.
    #[pyo3(signature = (symbol, subject, t, value = 1.0))]
    fn feed<'py>(
        &mut self,
        py: Python<'py>,
        symbol: &str,
        subject: &str,
        t: i64,
        value: f64,
    ) -> PyResult<Option<Bound<'py, PyAny>>> {
        let ev = IndicationEvent {
            symbol: symbol.to_string(),
            subject_id: subject.to_string(),
            at_time: t,
            value,
        };
        self.inner.feed(&ev).map(|m| to_py(py, &m.events)).transpose()
    }

    fn partial(&self, subject: &str) -> usize {
        self.inner.partial(subject)
    }
}

/// Runs a scenario file to its horizon and returns the report.
#[pyfunction]
#[pyo3(signature = (scenario, seed = 1, mode = "level", until = None, out = None, controllers = None))]
fn run<'py>(
    py: Python<'py>,
    scenario: PathBuf,
    seed: u64,
    mode: &str,
    until: Option<i64>,
    out: Option<PathBuf>,
    controllers: Option<Vec<String>>,
) -> PyResult<Bound<'py, PyAny>> {
    let options = options(seed, mode, until, controllers)?;
    let output = harness::run_scenario_file(&scenario, options, out.as_deref()).map_err(value_err)?;
    to_py(py, &output.report)
}

/// Runs every seed in both modes and returns the comparison.
#[pyfunction]
#[pyo3(signature = (scenario, seeds, until = None))]
fn compare<'py>(
    py: Python<'py>,
    scenario: PathBuf,
    seeds: Vec<u64>,
    until: Option<i64>,
) -> PyResult<Bound<'py, PyAny>> {
    let s = harness::Scenario::load(&scenario).map_err(value_err)?;
    let report = harness::compare_modes(&s, &seeds, until).map_err(value_err)?;
    to_py(py, &report)
}

/// Digest of a list of trace records (as returned by `Simulation.records`).
#[pyfunction]
fn trace_digest(records: &Bound<'_, PyList>) -> PyResult<String> {
    let records: Vec<adaptsim::trace::TraceRecord> =
        serde_json::from_value(from_py(records.as_any())?).map_err(value_err)?;
    Ok(adaptsim::trace::digest(&records))
}

#[pymodule]
fn adaptsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_class::<Simulation>()?;
    m.add_class::<Store>()?;
    m.add_class::<Matcher>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(trace_digest, m)?)?;
    Ok(())
}
