//! Python bindings. Structured results (estimates, reports, manifests) are
//! returned as plain dicts built from their JSON form.

use bpre::branching::{self, SurvivalMode};
use bpre::conditioned::{self, PlusMode, PlusSampler};
use bpre::experiment::{self, ExperimentConfig};
use bpre::gf::{self, Horizon};
use bpre::offspring::{self, EnvironmentModel, EnvironmentPath, OffspringLaw};
use bpre::rng::StreamSeed;
use bpre::{stats, walk, Error};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(bpre, BpreError, PyException);

fn err(e: Error) -> PyErr {
    match e {
        Error::InvalidParameter(_) | Error::OutOfRange(_) | Error::Config(_) | Error::WrongFamily(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => BpreError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| BpreError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "OffspringLaw", module = "bpre", from_py_object)]
#[derive(Clone)]
struct PyLaw {
    inner: OffspringLaw,
}

#[pymethods]
impl PyLaw {
    #[staticmethod]
    fn linear_fractional(mean: f64) -> PyResult<Self> {
        Ok(Self { inner: OffspringLaw::linear_fractional(mean).map_err(err)? })
    }

    #[staticmethod]
    fn poisson(mean: f64) -> PyResult<Self> {
        Ok(Self { inner: OffspringLaw::poisson(mean).map_err(err)? })
    }

    #[staticmethod]
    fn binary(p: f64) -> PyResult<Self> {
        Ok(Self { inner: OffspringLaw::binary(p).map_err(err)? })
    }

    #[staticmethod]
    fn bounded(probs: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: OffspringLaw::bounded(probs).map_err(err)? })
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn variance(&self) -> f64 {
        self.inner.variance()
    }

    fn prob(&self, y: u64) -> f64 {
        self.inner.prob(y)
    }

    fn pgf(&self, s: f64) -> PyResult<f64> {
        self.inner.pgf(s).map_err(err)
    }

    fn eta(&self) -> PyResult<f64> {
        self.inner.eta().map_err(err)
    }

    fn zeta(&self, a: u64) -> PyResult<f64> {
        self.inner.zeta(a).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "EnvironmentModel", module = "bpre", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: EnvironmentModel,
}

#[pymethods]
impl PyModel {
    /// Linear-fractional laws with log-mean increments +-log 2.
    #[staticmethod]
    fn default_critical() -> Self {
        Self { inner: EnvironmentModel::default_critical() }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: EnvironmentModel::from_json(text).map_err(err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn rho(&self) -> Option<f64> {
        self.inner.rho()
    }

    fn is_critical(&self) -> bool {
        self.inner.is_critical()
    }

    fn sample_environment(&self, n: usize, seed: u64) -> PyResult<PyEnv> {
        let mut rng = StreamSeed::new(seed).rng();
        Ok(PyEnv { inner: offspring::sample_environment(&self.inner, n, &mut rng).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        self.inner.to_json()
    }
}

#[pyclass(name = "EnvironmentPath", module = "bpre", from_py_object)]
#[derive(Clone)]
struct PyEnv {
    inner: EnvironmentPath,
}

#[pymethods]
impl PyEnv {
    #[staticmethod]
    fn from_laws(laws: Vec<PyLaw>) -> PyResult<Self> {
        let laws = laws.into_iter().map(|l| l.inner).collect();
        Ok(Self { inner: EnvironmentPath::from_laws(laws).map_err(err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// S_0..S_n.
    fn sums(&self) -> Vec<f64> {
        self.inner.sums().to_vec()
    }

    fn increments(&self) -> Vec<f64> {
        self.inner.increments().to_vec()
    }

    fn laws(&self) -> Vec<PyLaw> {
        self.inner.laws().iter().map(|l| PyLaw { inner: l.clone() }).collect()
    }
}

/// P(Z_n > 0 | Z_k = 1, env) with f_{k,n}(s) in place of extinction at s = 0.
#[pyfunction]
#[pyo3(signature = (env, k=0, s=0.0))]
fn survival_given_env(env: &PyEnv, k: usize, s: f64) -> PyResult<f64> {
    gf::survival_given_env(&env.inner, k, s).map_err(err)
}

/// Closed-form survival for linear-fractional environments; `horizon=None`
/// means ultimate survival. Returns (value, tail_bound).
#[pyfunction]
#[pyo3(signature = (env, k=0, horizon=None))]
fn lf_survival_exact(env: &PyEnv, k: usize, horizon: Option<usize>) -> PyResult<(f64, f64)> {
    let h = horizon.map_or(Horizon::Infinite, Horizon::Finite);
    let r = gf::lf_survival_exact(&env.inner, k, h).map_err(err)?;
    Ok((r.value, r.tail_bound))
}

#[pyfunction]
fn jirina_residual(env: &PyEnv, k: usize, s: f64) -> PyResult<f64> {
    Ok(gf::jirina_residual(&env.inner, k, s).map_err(err)?.residual)
}

#[pyfunction]
fn agresti_lower_bound(env: &PyEnv, k: usize, s: f64) -> PyResult<f64> {
    gf::agresti_lower_bound(&env.inner, k, s).map_err(err)
}

#[pyfunction]
fn quenched_bound(env: &PyEnv) -> f64 {
    gf::quenched_bound(&env.inner)
}

/// Population sizes Z_0..Z_n in a fixed environment.
#[pyfunction]
#[pyo3(signature = (env, z0, seed, ceiling=branching::DEFAULT_CEILING))]
fn simulate_population(env: &PyEnv, z0: u64, seed: u64, ceiling: f64) -> PyResult<Vec<f64>> {
    let mut rng = StreamSeed::new(seed).rng();
    Ok(branching::simulate_population(&env.inner, z0, ceiling, &mut rng).map_err(err)?.z)
}

/// Annealed P(Z_n > 0); mode is "naive" or "rao-blackwell".
#[pyfunction]
#[pyo3(signature = (model, n, replicates, seed, mode="rao-blackwell"))]
fn estimate_survival<'py>(
    py: Python<'py>,
    model: &PyModel,
    n: usize,
    replicates: usize,
    seed: u64,
    mode: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let mode = match mode {
        "naive" => SurvivalMode::Naive,
        "rao-blackwell" => SurvivalMode::RaoBlackwell,
        other => return Err(PyValueError::new_err(format!("unknown mode '{other}'"))),
    };
    let e = py
        .detach(|| branching::estimate_survival(&model.inner, n, replicates, StreamSeed::new(seed), mode))
        .map_err(err)?;
    to_py(py, &e)
}

/// Renewal function table on `grid`: exact for +-c walks, Monte Carlo otherwise.
#[pyfunction]
fn estimate_renewal_v<'py>(
    py: Python<'py>,
    model: &PyModel,
    grid: Vec<f64>,
    replicates: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let t = py
        .detach(|| walk::estimate_renewal_v(&model.inner, &grid, replicates, StreamSeed::new(seed)))
        .map_err(err)?;
    to_py(py, &t)
}

#[pyfunction]
fn theta_ratio<'py>(py: Python<'py>, model: &PyModel, n: usize, replicates: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let t = py
        .detach(|| conditioned::theta_ratio(&model.inner, n, replicates, StreamSeed::new(seed)))
        .map_err(err)?;
    to_py(py, &t)
}

#[pyfunction]
fn theta_series<'py>(
    py: Python<'py>,
    model: &PyModel,
    k_max: usize,
    horizon: usize,
    replicates: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let m = &model.inner;
    let mode = if m.lattice_span().is_some() { PlusMode::ExactKernel } else { PlusMode::Conditional };
    let sampler = PlusSampler::new(m, mode, None).map_err(err)?;
    let t = py
        .detach(|| conditioned::theta_series(m, &sampler, k_max, horizon, replicates, StreamSeed::new(seed)))
        .map_err(err)?;
    to_py(py, &t)
}

/// Two-sample KS on (value, weight) pairs.
#[pyfunction]
#[pyo3(signature = (a, b, alpha=0.01))]
fn ks_two_sample<'py>(py: Python<'py>, a: Vec<(f64, f64)>, b: Vec<(f64, f64)>, alpha: f64) -> PyResult<Bound<'py, PyAny>> {
    let ks = stats::ks_two_sample(&a, &b, alpha).map_err(err)?;
    let d = to_py(py, &ks)?;
    d.set_item("passes", ks.passes())?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (successes, trials, level=0.95))]
fn wilson_interval<'py>(py: Python<'py>, successes: u64, trials: u64, level: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &stats::wilson_interval(successes, trials, level).map_err(err)?)
}

/// Run a named experiment from a JSON config; returns the manifest.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(err)?;
    let manifest = py.detach(|| experiment::run_experiment(&cfg)).map_err(err)?;
    to_py(py, &manifest)
}

#[pymodule]
#[pyo3(name = "bpre")]
pub fn bpre_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("BpreError", m.py().get_type::<BpreError>())?;
    m.add("EXPERIMENTS", experiment::EXPERIMENTS.to_vec())?;
    m.add_class::<PyLaw>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyEnv>()?;
    m.add_function(wrap_pyfunction!(survival_given_env, m)?)?;
    m.add_function(wrap_pyfunction!(lf_survival_exact, m)?)?;
    m.add_function(wrap_pyfunction!(jirina_residual, m)?)?;
    m.add_function(wrap_pyfunction!(agresti_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(quenched_bound, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_population, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_survival, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_renewal_v, m)?)?;
    m.add_function(wrap_pyfunction!(theta_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(theta_series, m)?)?;
    m.add_function(wrap_pyfunction!(ks_two_sample, m)?)?;
    m.add_function(wrap_pyfunction!(wilson_interval, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
