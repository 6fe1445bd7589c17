//! Python bindings: an in-process service driven by explicit virtual time,
//! the experiment scenarios and the traffic model.

use cloudckpt::cloudsim::VirtualDuration;
use cloudckpt::gateway::Method;
use cloudckpt::harness::{self, ExperimentParams, NetworkModel};
use cloudckpt::{ApiRequest, Service as CoreService, ServiceConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde_json::Value;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// `m*c1 + n*c2` bytes per second.
#[pyfunction]
fn traffic(m: u64, n: u64, c1: u64, c2: u64) -> u64 {
    NetworkModel { m, n, c1, c2 }.traffic()
}

/// Runs a scenario and returns `(csv, summary_json)`.
#[pyfunction]
#[pyo3(signature = (name, seed = 1, config_toml = None))]
fn run_experiment(name: &str, seed: u64, config_toml: Option<&str>) -> PyResult<(String, String)> {
    let config = match config_toml {
        Some(src) => ServiceConfig::from_toml(src).map_err(value_err)?,
        None => ServiceConfig::default(),
    };
    let report = harness::run_experiment(name, &ExperimentParams { seed, config }).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((report.to_csv(), report.summary_json().to_string()))
}

#[pyfunction]
fn scenarios() -> Vec<&'static str> {
    harness::SCENARIOS.to_vec()
}

/// A service whose clock only moves when told to.
#[pyclass(name = "Service", unsendable)]
struct PyService {
    inner: CoreService,
}

#[pymethods]
impl PyService {
    #[new]
    #[pyo3(signature = (config_toml = None))]
    fn new(config_toml: Option<&str>) -> PyResult<Self> {
        let config = match config_toml {
            Some(src) => ServiceConfig::from_toml(src).map_err(value_err)?,
            None => ServiceConfig::default(),
        };
        let inner = CoreService::new(config).map_err(value_err)?;
        Ok(PyService { inner })
    }

    /// Answers one API call. `body` is a JSON string; returns `(status, json)`.
    #[pyo3(signature = (method, path, body = None))]
    fn handle(&mut self, method: &str, path: &str, body: Option<&str>) -> PyResult<(u16, String)> {
        let method: Method = method.parse().map_err(|_| value_err(format!("unknown method {method}")))?;
        let body = body.map(serde_json::from_str::<Value>).transpose().map_err(value_err)?;
        let resp = self.inner.handle(ApiRequest { method, path: path.to_string(), body });
        Ok((resp.status, resp.body.to_string()))
    }

    /// Advances virtual time, processing every event on the way.
    fn run_for(&mut self, seconds: f64) -> PyResult<()> {
        let d = VirtualDuration::try_from_secs_f64(seconds).ok_or_else(|| value_err(format!("invalid duration {seconds}")))?;
        self.inner.run_for(d);
        Ok(())
    }

    /// Current virtual time in seconds.
    fn now(&self) -> f64 {
        self.inner.now().as_secs_f64()
    }

    /// The event trace as JSON lines.
    fn trace(&self) -> String {
        self.inner.trace_json_lines()
    }
}

#[pymodule]
fn pycloudckpt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(traffic, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(scenarios, m)?)?;
    m.add_class::<PyService>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn traffic_by_hand() {
        assert_eq!(traffic(100, 0, 1, 5), 100);
        assert_eq!(traffic(0, 0, 1000, 5000), 0);
        assert_eq!(traffic(3, 2, 2, 7), 20);
    }
}
