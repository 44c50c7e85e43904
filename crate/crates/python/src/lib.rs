//! Python bindings. Reports and frames cross over as plain dicts and lists.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeSet;

use cryoloop::analysis::{self, HeatingRateParams};
use cryoloop::gasprops::{self, GasState};
use cryoloop::scenario::Scenario;
use cryoloop::session::Session;
use cryoloop::telemetry::to_csv_string;
use cryoloop::transient::{event_step, Action, ActionRecord};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::Serialize;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Round-trips through JSON so Python sees ordinary dicts and lists.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_error)?;
    PyModule::import(py, "json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = PyModule::import(py, "json")?
        .call_method1("dumps", (value,))?
        .extract()?;
    serde_json::from_str(&text).map_err(value_error)
}

/// Helium density, kg/m³.
#[pyfunction]
fn density(pressure_pa: f64, temperature_k: f64) -> PyResult<f64> {
    gasprops::density(pressure_pa, temperature_k).map_err(value_error)
}

/// Mass flow, kg/s, of a volume flow in m³/s at the given gas state.
#[pyfunction]
fn mass_flow_from_volume_flow(volume_flow: f64, pressure_pa: f64, temperature_k: f64) -> PyResult<f64> {
    let gas = GasState::new(pressure_pa, temperature_k).map_err(value_error)?;
    gasprops::mass_flow_from_volume_flow(volume_flow, &gas).map_err(value_error)
}

#[pyfunction]
fn heating_rate_factor(activation_temperature: f64, exponent: f64, temperature: f64) -> PyResult<f64> {
    let p = HeatingRateParams::new(activation_temperature, exponent).map_err(value_error)?;
    Ok(analysis::heating_rate_factor(&p, temperature))
}

/// Takes `[(["exp1"], 86.0), ...]` and returns the cryostat and per-loop shares.
#[pyfunction]
fn decompose_passive_loads<'py>(py: Python<'py>, measurements: Vec<(Vec<String>, f64)>) -> PyResult<Bound<'py, PyAny>> {
    let m: Vec<(BTreeSet<String>, f64)> = measurements
        .into_iter()
        .map(|(ids, w)| (ids.into_iter().collect(), w))
        .collect();
    to_py(py, &analysis::decompose_passive_loads(&m).map_err(value_error)?)
}

#[pyclass(name = "Scenario", skip_from_py_object)]
#[derive(Clone)]
struct PyScenario(Scenario);

#[pymethods]
impl PyScenario {
    #[new]
    #[pyo3(signature = (toml, overrides = Vec::new()))]
    fn new(toml: &str, overrides: Vec<String>) -> PyResult<Self> {
        Scenario::parse_with_overrides(toml, &overrides)
            .map(Self)
            .map_err(value_error)
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn from_file(path: &str, overrides: Vec<String>) -> PyResult<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::new(&text, overrides)
    }

    fn to_toml(&self) -> String {
        self.0.to_toml()
    }

    #[getter]
    fn duration_s(&self) -> f64 {
        self.0.outputs.duration_s
    }

    #[setter]
    fn set_duration_s(&mut self, seconds: f64) {
        self.0.outputs.duration_s = seconds;
    }

    /// Runs to the end and returns the telemetry frames.
    fn run<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let run = self.0.run().map_err(value_error)?;
        to_py(py, &run.frames)
    }

    /// Runs to the end and returns the telemetry as CSV text.
    fn run_csv(&self) -> PyResult<String> {
        let run = self.0.run().map_err(value_error)?;
        Ok(to_csv_string(&run.frames))
    }

    fn solve_steady<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.solve_steady().map_err(value_error)?)
    }
}

/// An interactive run driven one action at a time.
#[pyclass(name = "Session", unsendable)]
struct PySession(Session);

#[pymethods]
impl PySession {
    #[new]
    fn new(scenario: &PyScenario) -> PyResult<Self> {
        Session::new(scenario.0.clone()).map(Self).map_err(value_error)
    }

    #[getter]
    fn clock(&self) -> f64 {
        self.0.clock()
    }

    /// Applies an action such as `{"action": "set_rpm", "rpm": 15000}` and
    /// returns the acknowledgement frame.
    fn act<'py>(&mut self, py: Python<'py>, action: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
        let record: ActionRecord = from_py(py, action)?;
        let action = Action::try_from(record).map_err(value_error)?;
        to_py(py, &self.0.act(action).map_err(value_error)?)
    }

    /// Integrates `seconds` of plant time and returns the frames sampled.
    fn advance<'py>(&mut self, py: Python<'py>, seconds: f64) -> PyResult<Bound<'py, PyAny>> {
        if !(seconds >= 0.0) {
            return Err(PyValueError::new_err("seconds must be non-negative"));
        }
        let steps = event_step(seconds, self.0.simulation().model().dt());
        to_py(py, &self.0.advance_steps(steps).map_err(value_error)?)
    }

    fn snapshot<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.snapshot())
    }

    fn csv(&self) -> String {
        self.0.csv()
    }

    /// Scenario that reproduces this session from the start.
    fn replay_scenario(&self) -> PyScenario {
        PyScenario(self.0.replay_scenario())
    }
}

#[pymodule]
#[pyo3(name = "cryoloop")]
fn cryoloop_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(density, m)?)?;
    m.add_function(wrap_pyfunction!(mass_flow_from_volume_flow, m)?)?;
    m.add_function(wrap_pyfunction!(heating_rate_factor, m)?)?;
    m.add_function(wrap_pyfunction!(decompose_passive_loads, m)?)?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PySession>()?;
    Ok(())
}
