//! Python bindings: setups, full pipeline runs, catalog strata and the
//! homology helpers.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cleanmorse_core::geometry::{make_builtin_setup, make_custom_setup, MorseSetup, BUILTIN_SETUPS};
use cleanmorse_core::homology::{betti, build_chain_complex, homology_ranks, smith_invariants, Contribution, IntMatrix, Ring};
use cleanmorse_core::kuranishi::{enumerate_strata, ModuliCatalog};
use cleanmorse_core::pipeline::{run_example, selftest, RunConfig, RunReport};
use cleanmorse_core::Error;

pyo3::create_exception!(cleanmorse, CleanMorseError, PyRuntimeError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidParameters(_) | Error::UnknownSetup(_) | Error::InvalidTuple(_) | Error::Json(_) => PyValueError::new_err(e.to_string()),
        other => CleanMorseError::new_err(other.to_string()),
    }
}

fn parse_ring(ring: &str) -> PyResult<Ring> {
    ring.parse().map_err(|e: Error| PyValueError::new_err(e.to_string()))
}

/// A manifold with its height function, critical points and normal charts.
#[pyclass(frozen, name = "Setup")]
struct PySetup(MorseSetup);

#[pymethods]
impl PySetup {
    #[new]
    fn new(name: &str) -> PyResult<Self> {
        make_builtin_setup(name).map(Self).map_err(to_py)
    }

    /// Build from a JSON description such as
    /// `{"name": "t", "family": "torus", "major": 2, "minor": 1, "tilt": 0}`.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        make_custom_setup(text).map(Self).map_err(to_py)
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn euler_characteristic(&self) -> i64 {
        self.0.euler_characteristic()
    }

    /// `(id, morse_index, value)` for every critical point, highest first.
    fn critical_points(&self) -> Vec<(String, usize, f64)> {
        self.0.critical_points.iter().map(|c| (c.id.clone(), c.morse_index, c.value)).collect()
    }

    /// Labels of the moduli catalog in energy order (1-based positions).
    fn catalog(&self) -> Vec<String> {
        ModuliCatalog::from_setup(&self.0).entries.iter().map(|e| e.label.clone()).collect()
    }

    /// Index tuples of catalog entry `level` with their chart names.
    fn strata(&self, level: usize) -> PyResult<Vec<(Vec<usize>, String)>> {
        let cat = ModuliCatalog::from_setup(&self.0);
        let tuples = enumerate_strata(&cat, level).map_err(to_py)?;
        Ok(tuples.into_iter().map(|t| {
            let name = t.gluing_order_name();
            (t.0, name)
        }).collect())
    }

    fn __repr__(&self) -> String {
        format!("Setup({:?}, {} critical points)", self.0.name, self.0.critical_points.len())
    }
}

/// Run configuration; everything not exposed as an argument can be set
/// through `from_json`.
#[pyclass(name = "RunConfig")]
struct PyRunConfig(RunConfig);

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (setup="upright_torus", ring="Z", seed=0, refine=true, out_dir=None))]
    fn new(setup: &str, ring: &str, seed: u64, refine: bool, out_dir: Option<PathBuf>) -> PyResult<Self> {
        let mut cfg = RunConfig::for_setup(setup);
        cfg.ring = parse_ring(ring)?;
        cfg.seed = seed;
        cfg.refine = refine;
        cfg.out_dir = out_dir;
        Ok(Self(cfg))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(Self).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.0).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// Perturbation value for one obstructed component.
    fn set_sigma(&mut self, component: String, values: Vec<f64>) {
        self.0.sigma.insert(component, values);
    }

    #[getter]
    fn setup(&self) -> String {
        self.0.setup.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }
}

/// Result of a pipeline run.
#[pyclass(frozen, name = "Report")]
struct PyReport(RunReport);

#[pymethods]
impl PyReport {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RunReport::read(&path).map(Self).map_err(to_py)
    }

    #[getter]
    fn status(&self) -> String {
        self.0.status.clone()
    }

    #[getter]
    fn passed(&self) -> bool {
        self.0.passed()
    }

    #[getter]
    fn error(&self) -> Option<String> {
        self.0.error.clone()
    }

    #[getter]
    fn betti(&self) -> Option<Vec<usize>> {
        self.0.homology.as_ref().map(|h| h.betti.clone())
    }

    #[getter]
    fn betti_z2(&self) -> Option<Vec<usize>> {
        self.0.homology.as_ref().map(|h| h.betti_z2.clone())
    }

    /// `(name, passed, detail)` per check.
    fn checks(&self) -> Vec<(String, bool, String)> {
        self.0.checks.iter().map(|c| (c.name.clone(), c.passed, c.detail.clone())).collect()
    }

    /// `(label, component count)` per moduli space.
    fn moduli(&self) -> Vec<(String, usize)> {
        self.0.moduli.iter().map(|m| (m.label.clone(), m.components.len())).collect()
    }

    /// `(pair, from, to, zeros, signed count)` per broken pair.
    fn gluing_counts(&self) -> Vec<(String, String, String, usize, i64)> {
        let Some(g) = &self.0.gluing else { return Vec::new() };
        g.pairs
            .iter()
            .map(|p| (p.pair.label(), p.contributes_to.0.clone(), p.contributes_to.1.clone(), p.count.count(), p.count.signed_count))
            .collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn write(&self, dir: PathBuf) -> PyResult<PathBuf> {
        self.0.write(&dir).map_err(to_py)
    }
}

#[pyfunction]
fn builtin_setups() -> Vec<&'static str> {
    BUILTIN_SETUPS.to_vec()
}

/// Run the whole pipeline. The GIL is released while it runs.
#[pyfunction]
fn run(py: Python<'_>, config: &PyRunConfig) -> PyReport {
    let cfg = config.0.clone();
    PyReport(py.detach(move || run_example(&cfg)))
}

/// Nonzero invariant factors of an integer matrix.
#[pyfunction]
fn smith_normal_form(rows: Vec<Vec<i64>>) -> PyResult<Vec<i64>> {
    if rows.iter().any(|r| r.len() != rows.first().map_or(0, |f| f.len())) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    smith_invariants(&IntMatrix::from_rows(&rows)).map_err(to_py)
}

/// Betti numbers of a complex given by generators `(name, grade)` and
/// signed incidences `(from, to, sign)`.
#[pyfunction]
#[pyo3(signature = (generators, incidences, ring="Z"))]
fn betti_numbers(generators: Vec<(String, usize)>, incidences: Vec<(String, String, i8)>, ring: &str) -> PyResult<Vec<usize>> {
    let contributions: Vec<Contribution> = incidences
        .into_iter()
        .enumerate()
        .map(|(i, (from, to, sign))| Contribution { from, to, source: format!("input#{i}"), sign })
        .collect();
    let cc = build_chain_complex(&generators, &contributions, parse_ring(ring)?).map_err(to_py)?;
    Ok(betti(&homology_ranks(&cc).map_err(to_py)?))
}

/// Quick property checks: `(name, passed, detail)`.
#[pyfunction(name = "selftest")]
fn run_selftest() -> Vec<(String, bool, String)> {
    selftest().into_iter().map(|c| (c.name, c.passed, c.detail)).collect()
}

#[pymodule]
fn cleanmorse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("CleanMorseError", m.py().get_type::<CleanMorseError>())?;
    m.add_class::<PySetup>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(builtin_setups, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(smith_normal_form, m)?)?;
    m.add_function(wrap_pyfunction!(betti_numbers, m)?)?;
    m.add_function(wrap_pyfunction!(run_selftest, m)?)?;
    Ok(())
}
