//! Python bindings for the host-side policy and validation layer: policy
//! synthesis/validation/rendering, guest resolution, manifest parsing and
//! output-record validation. Building and driving sandboxes stays with the
//! `plugcell` CLI (it needs host-admin privilege); these bindings cover the
//! pure surfaces a monitoring core written in Python integrates against.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use plugcell::guest::{self, FallbackAdapter, GuestTarget};
use plugcell::manifest;
use plugcell::policy::{self, PolicyOptions, SandboxPolicy};
use plugcell::record;
use plugcell::seccomp;
use plugcell::session::Validator;

fn json_to_py(py: Python<'_>, value: &serde_json::Value) -> PyResult<Py<PyAny>> {
    let as_str = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let json = py.import("json")?;
    Ok(json.call_method1("loads", (as_str,))?.unbind())
}

fn parse_options(options_json: Option<&str>) -> PyResult<PolicyOptions> {
    match options_json {
        Some(text) => serde_json::from_str(text)
            .map_err(|e| PyValueError::new_err(format!("bad options: {e}"))),
        None => Ok(PolicyOptions::default()),
    }
}

/// Resolve a running process into a guest handle (engine-less adapter).
#[pyfunction]
#[pyo3(signature = (init_pid, rootfs_path, container_id = "guest"))]
fn resolve_guest(py: Python<'_>, init_pid: i32, rootfs_path: &str, container_id: &str) -> PyResult<Py<PyAny>> {
    let adapter = FallbackAdapter {
        init_pid,
        rootfs_path: rootfs_path.into(),
    };
    let guest = guest::resolve_guest(container_id, &adapter)
        .map_err(|e| PyOSError::new_err(e.to_string()))?;
    let value = serde_json::to_value(&guest).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &value)
}

/// True while the resolved guest's init process is alive (pid-recycling safe).
#[pyfunction]
fn guest_alive(guest_json: &str) -> PyResult<bool> {
    let guest: GuestTarget =
        serde_json::from_str(guest_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(guest::guest_alive(&guest))
}

/// The sandbox policy: what one sandbox grants and denies.
#[pyclass]
struct Policy {
    inner: SandboxPolicy,
}

#[pymethods]
impl Policy {
    /// Synthesize the default policy for a resolved guest.
    #[staticmethod]
    #[pyo3(signature = (guest_json, options_json = None))]
    fn default_for(guest_json: &str, options_json: Option<&str>) -> PyResult<Policy> {
        let guest: GuestTarget =
            serde_json::from_str(guest_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let opts = parse_options(options_json)?;
        let inner = policy::default_policy(&guest, &opts)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Policy { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Policy> {
        let inner: SandboxPolicy =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Policy { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Violations as a list of dicts; empty means the policy is valid.
    fn validate(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let report = policy::validate_policy(&self.inner);
        let value = serde_json::to_value(&report.violations)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        json_to_py(py, &value)
    }

    fn is_valid(&self) -> bool {
        policy::validate_policy(&self.inner).is_valid()
    }

    /// Rendered seccomp filter as raw BPF bytes (byte-identical for equal
    /// policies).
    fn seccomp_program<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let prog = seccomp::render_seccomp(&self.inner)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyBytes::new(py, &prog.to_bytes()))
    }

    /// Ordered firewall rules as dicts.
    fn firewall_rules(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let rules = policy::render_firewall(&self.inner);
        let value = serde_json::to_value(&rules).map_err(|e| PyValueError::new_err(e.to_string()))?;
        json_to_py(py, &value)
    }

    fn __repr__(&self) -> String {
        format!(
            "Policy(caps={}, localhost_mode={:?}, firewall_rules={})",
            self.inner.caps.len(),
            self.inner.localhost_mode,
            self.inner.firewall.len()
        )
    }
}

/// Parse a `plugins-to-run` manifest (NDJSON). Raises ValueError with the
/// offending line on rejection.
#[pyfunction]
fn parse_manifest(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    let parsed = manifest::parse_manifest(text.as_bytes())
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let entries: Vec<serde_json::Value> = parsed
        .entries
        .iter()
        .map(|e| {
            serde_json::json!({
                "name": e.name,
                "source": e.source.as_str(),
                "args": e.args,
                "freq_s": e.freq_s,
                "timeout_s": e.timeout_s(),
            })
        })
        .collect();
    json_to_py(py, &serde_json::Value::Array(entries))
}

/// Stateful output validator: schema plus per-stream timestamp monotonicity.
#[pyclass]
struct OutputValidator {
    inner: Validator,
    accepted: u64,
    rejected: u64,
}

#[pymethods]
impl OutputValidator {
    #[new]
    fn new() -> OutputValidator {
        OutputValidator {
            inner: Validator::default(),
            accepted: 0,
            rejected: 0,
        }
    }

    /// Returns the accepted record as a dict, or raises ValueError carrying
    /// the typed rejection. Total over arbitrary bytes.
    fn validate(&mut self, py: Python<'_>, line: &[u8]) -> PyResult<Py<PyAny>> {
        match self.inner.validate_output(line) {
            Ok(rec) => {
                self.accepted += 1;
                let value =
                    serde_json::to_value(&rec).map_err(|e| PyValueError::new_err(e.to_string()))?;
                json_to_py(py, &value)
            }
            Err(reason) => {
                self.rejected += 1;
                Err(PyValueError::new_err(format!("{reason:?}")))
            }
        }
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        d.set_item("accepted", self.accepted)?;
        d.set_item("rejected", self.rejected)?;
        Ok(d)
    }
}

/// Schema-check one record line without stream state.
#[pyfunction]
fn validate_record(py: Python<'_>, line: &[u8]) -> PyResult<Py<PyAny>> {
    match record::validate_line(line) {
        Ok(rec) => {
            let value = serde_json::to_value(&rec).map_err(|e| PyValueError::new_err(e.to_string()))?;
            json_to_py(py, &value)
        }
        Err(reason) => Err(PyValueError::new_err(format!("{reason:?}"))),
    }
}

#[pymodule]
fn plugcell_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Policy>()?;
    m.add_class::<OutputValidator>()?;
    m.add_function(wrap_pyfunction!(resolve_guest, m)?)?;
    m.add_function(wrap_pyfunction!(guest_alive, m)?)?;
    m.add_function(wrap_pyfunction!(parse_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(validate_record, m)?)?;
    Ok(())
}
