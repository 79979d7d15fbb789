//! Python bindings: Gaussian beliefs, measurement models, the filter updates
//! and experiment sweeps.

use std::path::PathBuf;

use divkf::adf::{default_ukf_lambda, ekf_update, predict, ukf_update};
use divkf::divergence::{akf_update, mkf_update, skf_update, SkfConfig};
use divkf::harness::{run_sweep, ExperimentConfig, OutputSpec, ResultRow};
use divkf::models::{
    black_scholes_model, black_scholes_price, radar_model, FnMeasurement, JacobianMode,
    LinearDynamics, LinearMeasurement, MeasurementModel, OptionContract,
};
use divkf::{FilterError, GaussianBelief, SpdMatrix};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: FilterError) -> PyErr {
    match e {
        FilterError::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// A Gaussian `N(mean, cov)`.
#[pyclass(name = "GaussianBelief", frozen)]
struct PyBelief {
    inner: GaussianBelief,
}

#[pymethods]
impl PyBelief {
    #[new]
    fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner = GaussianBelief::from_parts(DVector::from_vec(mean), matrix(&cov)?).map_err(to_py)?;
        Ok(PyBelief { inner })
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.mean.iter().copied().collect()
    }

    #[getter]
    fn cov(&self) -> Vec<Vec<f64>> {
        rows(self.inner.cov.matrix())
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn log_density(&self, x: Vec<f64>) -> f64 {
        self.inner.log_density(&DVector::from_vec(x))
    }

    fn __repr__(&self) -> String {
        format!("GaussianBelief(mean={:?})", self.mean())
    }
}

/// A measurement equation `y = h(x) + v`.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: Box<dyn MeasurementModel>,
}

#[pymethods]
impl PyModel {
    /// Range and bearing from the origin of a `[x, vx, y, vy]` state.
    #[staticmethod]
    fn radar(range_var: f64, bearing_var: f64) -> PyResult<Self> {
        let m = radar_model(range_var, bearing_var).map_err(to_py)?;
        Ok(PyModel { inner: Box::new(m) })
    }

    /// `y = H x + v`, `v ~ N(0, R)`.
    #[staticmethod]
    fn linear(h: Vec<Vec<f64>>, r: Vec<Vec<f64>>) -> PyResult<Self> {
        let noise = SpdMatrix::new(matrix(&r)?).map_err(to_py)?;
        let m = LinearMeasurement::new(matrix(&h)?, noise).map_err(to_py)?;
        Ok(PyModel { inner: Box::new(m) })
    }

    /// Scalar `y = x^2 + v`.
    #[staticmethod]
    fn square(variance: f64) -> PyResult<Self> {
        if !(variance > 0.0) {
            return Err(PyValueError::new_err("variance must be positive"));
        }
        Ok(PyModel {
            inner: Box::new(FnMeasurement::square(variance)),
        })
    }

    /// Call and put quotes of one contract from a `[sigma, r]` state.
    #[staticmethod]
    fn black_scholes(strike: f64, maturity: f64, spot: f64, noise_sd: f64) -> PyResult<Self> {
        let contract = OptionContract::new(strike, maturity, spot).map_err(to_py)?;
        let m = black_scholes_model(contract, noise_sd, JacobianMode::ClosedForm).map_err(to_py)?;
        Ok(PyModel { inner: Box::new(m) })
    }

    fn eval(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let y = self.inner.eval(&DVector::from_vec(x)).map_err(to_py)?;
        Ok(y.iter().copied().collect())
    }

    fn log_likelihood(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        self.inner
            .log_likelihood(&DVector::from_vec(x), &DVector::from_vec(y))
            .map_err(to_py)
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }
}

fn check_dims(prior: &GaussianBelief, model: &dyn MeasurementModel, y: &[f64]) -> PyResult<()> {
    if prior.dim() != model.state_dim() || y.len() != model.obs_dim() {
        return Err(PyValueError::new_err(format!(
            "model maps {} -> {}, got belief of dim {} and y of length {}",
            model.state_dim(),
            model.obs_dim(),
            prior.dim(),
            y.len()
        )));
    }
    Ok(())
}

fn wrap(b: GaussianBelief) -> PyBelief {
    PyBelief { inner: b }
}

/// Linear-Gaussian prediction `N(F mu, F P F^T + Q)`.
#[pyfunction]
fn predict_linear(belief: &PyBelief, f: Vec<Vec<f64>>, q: Vec<Vec<f64>>) -> PyResult<PyBelief> {
    let dynamics = LinearDynamics::new(matrix(&f)?, matrix(&q)?).map_err(to_py)?;
    Ok(wrap(predict(&belief.inner, &dynamics).map_err(to_py)?))
}

#[pyfunction(name = "ekf_update")]
fn py_ekf_update(prior: &PyBelief, model: &PyModel, y: Vec<f64>) -> PyResult<PyBelief> {
    check_dims(&prior.inner, model.inner.as_ref(), &y)?;
    let post = ekf_update(&prior.inner, model.inner.as_ref(), &DVector::from_vec(y)).map_err(to_py)?;
    Ok(wrap(post))
}

#[pyfunction(name = "ukf_update", signature = (prior, model, y, lam = None))]
fn py_ukf_update(prior: &PyBelief, model: &PyModel, y: Vec<f64>, lam: Option<f64>) -> PyResult<PyBelief> {
    check_dims(&prior.inner, model.inner.as_ref(), &y)?;
    let lam = lam.unwrap_or_else(|| default_ukf_lambda(prior.inner.dim()));
    let post = ukf_update(&prior.inner, model.inner.as_ref(), &DVector::from_vec(y), lam)
        .map_err(to_py)?;
    Ok(wrap(post))
}

/// Stochastic-search update; returns the belief and whether it stopped early.
#[pyfunction(name = "skf_update", signature = (prior, model, y, seed, iterations = 50, samples = 500))]
fn py_skf_update(
    prior: &PyBelief,
    model: &PyModel,
    y: Vec<f64>,
    seed: u64,
    iterations: usize,
    samples: usize,
) -> PyResult<(PyBelief, bool)> {
    check_dims(&prior.inner, model.inner.as_ref(), &y)?;
    let cfg = SkfConfig {
        iterations,
        samples_per_iter: samples,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = skf_update(&prior.inner, model.inner.as_ref(), &DVector::from_vec(y), &cfg, &mut rng)
        .map_err(to_py)?;
    Ok((wrap(out.belief), out.stopped_early))
}

/// Moment-matching update drawn from the prior; returns the belief and
/// whether the ensemble was degenerate.
#[pyfunction(name = "mkf_update", signature = (prior, model, y, seed, samples = 1000))]
fn py_mkf_update(
    prior: &PyBelief,
    model: &PyModel,
    y: Vec<f64>,
    seed: u64,
    samples: usize,
) -> PyResult<(PyBelief, bool)> {
    check_dims(&prior.inner, model.inner.as_ref(), &y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = &prior.inner;
    let out = mkf_update(p, model.inner.as_ref(), &DVector::from_vec(y), samples, p, &mut rng)
        .map_err(to_py)?;
    Ok((wrap(out.belief), out.degenerate))
}

/// Alpha-divergence update with the prior as both initial q and proposal.
#[pyfunction(name = "akf_update", signature = (prior, model, y, alpha, seed, samples = 1000))]
fn py_akf_update(
    prior: &PyBelief,
    model: &PyModel,
    y: Vec<f64>,
    alpha: f64,
    seed: u64,
    samples: usize,
) -> PyResult<(PyBelief, bool)> {
    check_dims(&prior.inner, model.inner.as_ref(), &y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = &prior.inner;
    let out = akf_update(p, model.inner.as_ref(), &DVector::from_vec(y), alpha, samples, p, p, &mut rng)
        .map_err(to_py)?;
    Ok((wrap(out.belief), out.degenerate))
}

/// `(call, put)` for volatility `sigma` and rate `r`.
#[pyfunction(name = "black_scholes_price")]
fn py_black_scholes_price(sigma: f64, r: f64, strike: f64, maturity: f64, spot: f64) -> PyResult<(f64, f64)> {
    let contract = OptionContract::new(strike, maturity, spot).map_err(to_py)?;
    let [call, put] = black_scholes_price(&DVector::from_column_slice(&[sigma, r]), &contract).map_err(to_py)?;
    Ok((call, put))
}

fn row_dict<'py>(py: Python<'py>, row: &ResultRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("scenario", &row.scenario)?;
    d.set_item("filter", &row.filter)?;
    d.set_item("sigma_q", row.sigma_q)?;
    d.set_item("sigma_cv", row.sigma_cv)?;
    d.set_item("sigma_r", row.sigma_r)?;
    d.set_item("alpha", row.alpha)?;
    d.set_item("r_max", row.r_max)?;
    d.set_item("metric", &row.metric)?;
    d.set_item("value", row.value)?;
    d.set_item("stderr", row.stderr)?;
    d.set_item("trials", row.trials)?;
    d.set_item("runtime_ms", row.runtime_ms)?;
    Ok(d)
}

/// Runs a sweep from a JSON config. With `out_dir` the result files are
/// written there as `<stem>.csv`, `<stem>.json` and `<stem>.config.json`.
#[pyfunction(signature = (config_json, out_dir = None, stem = "results"))]
fn run_experiment<'py>(
    py: Python<'py>,
    config_json: &str,
    out_dir: Option<PathBuf>,
    stem: &str,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(to_py)?;
    let output = out_dir.map(|d| OutputSpec::new(&d, stem));
    let rows = py
        .detach(|| run_sweep(&cfg, output.as_ref()))
        .map_err(to_py)?;
    rows.iter().map(|r| row_dict(py, r)).collect()
}

#[pymodule]
#[pyo3(name = "divkf")]
fn divkf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBelief>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(predict_linear, m)?)?;
    m.add_function(wrap_pyfunction!(py_ekf_update, m)?)?;
    m.add_function(wrap_pyfunction!(py_ukf_update, m)?)?;
    m.add_function(wrap_pyfunction!(py_skf_update, m)?)?;
    m.add_function(wrap_pyfunction!(py_mkf_update, m)?)?;
    m.add_function(wrap_pyfunction!(py_akf_update, m)?)?;
    m.add_function(wrap_pyfunction!(py_black_scholes_price, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
