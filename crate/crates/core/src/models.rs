//! Dynamics and measurement models used by the experiments.
//!
//! States for the tracking problems use the constant-velocity ordering
//! `[x1, v1, x2, v2]`; the options problem uses `[sigma, r]`.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FilterError, Result};
use crate::gaussian::{symmetrize, SpdMatrix};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Linear Gaussian state transition `x_t = F x_{t-1} + w_t`, `w_t ~ N(0, Q)`.
///
/// `Q` only needs to be positive semidefinite: the constant-velocity noise is
/// rank deficient. A square-root factor `G` with `G G^T = Q` is kept for
/// sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    transition: DMatrix<f64>,
    process_noise: DMatrix<f64>,
    noise_factor: DMatrix<f64>,
}

impl LinearDynamics {
    pub fn new(transition: DMatrix<f64>, process_noise: DMatrix<f64>) -> Result<Self> {
        let d = transition.nrows();
        if transition.ncols() != d {
            return Err(FilterError::NotSquare {
                rows: d,
                cols: transition.ncols(),
            });
        }
        if process_noise.shape() != (d, d) {
            return Err(FilterError::DimensionMismatch {
                expected: d,
                actual: process_noise.nrows(),
            });
        }
        if transition.iter().chain(process_noise.iter()).any(|v| !v.is_finite()) {
            return Err(FilterError::NonFinite("dynamics"));
        }
        let q = symmetrize(&process_noise);
        let eig = SymmetricEigen::new(q.clone());
        let scale = q.amax().max(f64::MIN_POSITIVE);
        if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
            return Err(FilterError::DomainError(
                "process noise is not positive semidefinite".into(),
            ));
        }
        let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let noise_factor = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
        Ok(LinearDynamics {
            transition,
            process_noise: q,
            noise_factor,
        })
    }

    /// `F = I`, `Q = sigma_q^2 I`.
    pub fn random_walk(dim: usize, sigma_q: f64) -> Result<Self> {
        Self::isotropic(DMatrix::identity(dim, dim), sigma_q)
    }

    /// Keeps `F` and replaces the process noise with `sigma_q^2 I`.
    pub fn isotropic(transition: DMatrix<f64>, sigma_q: f64) -> Result<Self> {
        if !(sigma_q >= 0.0) {
            return Err(FilterError::DomainError(format!("sigma_q = {sigma_q}")));
        }
        let d = transition.nrows();
        Self::new(transition, DMatrix::identity(d, d) * (sigma_q * sigma_q))
    }

    pub fn dim(&self) -> usize {
        self.transition.nrows()
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn process_noise(&self) -> &DMatrix<f64> {
        &self.process_noise
    }

    pub fn propagate(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.transition * x
    }

    /// Draws `F x + w` with `w ~ N(0, Q)`.
    pub fn sample_next<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let z = DVector::<f64>::from_fn(self.dim(), |_, _| rng.sample(StandardNormal));
        &self.transition * x + &self.noise_factor * z
    }

    /// Same transition with the noise removed.
    pub fn noiseless(&self) -> Self {
        let d = self.dim();
        LinearDynamics {
            transition: self.transition.clone(),
            process_noise: DMatrix::zeros(d, d),
            noise_factor: DMatrix::zeros(d, d),
        }
    }
}

/// Constant-velocity dynamics in the plane with white-noise acceleration.
///
/// Per axis `F2 = [[1, dt], [0, 1]]` and `Q2 = sigma_cv * [[dt^4/4, dt^3/2], [dt^3/2, dt^2]]`.
pub fn cv_dynamics(dt: f64, sigma_cv: f64) -> Result<LinearDynamics> {
    if !(dt > 0.0) || !(sigma_cv >= 0.0) {
        return Err(FilterError::DomainError(format!(
            "cv dynamics needs dt > 0 and sigma_cv >= 0 (got {dt}, {sigma_cv})"
        )));
    }
    let mut f = DMatrix::<f64>::identity(4, 4);
    f[(0, 1)] = dt;
    f[(2, 3)] = dt;
    let q2 = DMatrix::from_row_slice(
        2,
        2,
        &[
            dt.powi(4) / 4.0,
            dt.powi(3) / 2.0,
            dt.powi(3) / 2.0,
            dt * dt,
        ],
    ) * sigma_cv;
    let mut q = DMatrix::<f64>::zeros(4, 4);
    q.view_mut((0, 0), (2, 2)).copy_from(&q2);
    q.view_mut((2, 2), (2, 2)).copy_from(&q2);
    // Q2 = sigma_cv * g g^T with g = [dt^2/2, dt]: use the exact factor.
    let gain = sigma_cv.sqrt();
    let mut g = DMatrix::<f64>::zeros(4, 4);
    g[(0, 0)] = gain * dt * dt / 2.0;
    g[(1, 0)] = gain * dt;
    g[(2, 2)] = gain * dt * dt / 2.0;
    g[(3, 2)] = gain * dt;
    Ok(LinearDynamics {
        transition: f,
        process_noise: q,
        noise_factor: g,
    })
}

/// A measurement equation `y = h(x) + v`, `v ~ N(0, R)`.
pub trait MeasurementModel: Send + Sync {
    fn state_dim(&self) -> usize;

    fn obs_dim(&self) -> usize;

    /// `h(x)`.
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    /// Jacobian of `h` at `x`, `p x d`.
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// Measurement noise covariance `R`.
    fn noise(&self) -> &SpdMatrix;

    /// Components whose residuals are angles wrapped into `(-pi, pi]`.
    fn wrap_flags(&self) -> Vec<bool> {
        vec![false; self.obs_dim()]
    }

    /// `y - y_hat`, with angular components wrapped.
    fn residual(&self, y: &DVector<f64>, y_hat: &DVector<f64>) -> DVector<f64> {
        let mut r = y - y_hat;
        for (i, wrap) in self.wrap_flags().into_iter().enumerate() {
            if wrap {
                r[i] = wrap_angle(r[i]);
            }
        }
        r
    }

    /// `-1/2 (y - h(x))^T R^{-1} (y - h(x))`.
    fn neg_half_quad(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        let r = self.residual(y, &self.eval(x)?);
        Ok(-0.5 * self.noise().quad_form(&r))
    }

    /// `ln p(y | x)`.
    fn log_likelihood(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        let p = self.obs_dim() as f64;
        Ok(self.neg_half_quad(x, y)? - 0.5 * (p * (2.0 * PI).ln() + self.noise().log_det()))
    }
}

/// `h(x) = H x`.
#[derive(Debug, Clone)]
pub struct LinearMeasurement {
    matrix: DMatrix<f64>,
    noise: SpdMatrix,
}

impl LinearMeasurement {
    pub fn new(matrix: DMatrix<f64>, noise: SpdMatrix) -> Result<Self> {
        if matrix.nrows() != noise.dim() {
            return Err(FilterError::DimensionMismatch {
                expected: noise.dim(),
                actual: matrix.nrows(),
            });
        }
        Ok(LinearMeasurement { matrix, noise })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl MeasurementModel for LinearMeasurement {
    fn state_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn obs_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.matrix * x)
    }

    fn jacobian(&self, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.matrix.clone())
    }

    fn noise(&self) -> &SpdMatrix {
        &self.noise
    }
}

type VecFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type MatFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// A measurement model built from closures; handy for small test problems.
pub struct FnMeasurement {
    state_dim: usize,
    h: Box<VecFn>,
    jac: Box<MatFn>,
    noise: SpdMatrix,
}

impl FnMeasurement {
    pub fn new<H, J>(state_dim: usize, h: H, jac: J, noise: SpdMatrix) -> Self
    where
        H: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        FnMeasurement {
            state_dim,
            h: Box::new(h),
            jac: Box::new(jac),
            noise,
        }
    }

    /// Scalar `y = x^2 + v`, `v ~ N(0, variance)`.
    pub fn square(variance: f64) -> Self {
        Self::new(
            1,
            |x| DVector::from_element(1, x[0] * x[0]),
            |x| DMatrix::from_element(1, 1, 2.0 * x[0]),
            SpdMatrix::scaled_identity(1, variance),
        )
    }
}

impl fmt::Debug for FnMeasurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnMeasurement")
            .field("state_dim", &self.state_dim)
            .field("noise", &self.noise)
            .finish_non_exhaustive()
    }
}

impl MeasurementModel for FnMeasurement {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn obs_dim(&self) -> usize {
        self.noise.dim()
    }

    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok((self.h)(x))
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok((self.jac)(x))
    }

    fn noise(&self) -> &SpdMatrix {
        &self.noise
    }
}

/// Range and bearing from the origin: `h(x) = [sqrt(x1^2 + x2^2), atan2(x2, x1)]`.
#[derive(Debug, Clone)]
pub struct RadarMeasurement {
    noise: SpdMatrix,
}

/// Radar measurement with `R = diag(sigma_r2, sigma_theta2)`.
pub fn radar_model(sigma_r2: f64, sigma_theta2: f64) -> Result<RadarMeasurement> {
    if !(sigma_r2 > 0.0 && sigma_theta2 > 0.0) {
        return Err(FilterError::DomainError("radar variances must be positive".into()));
    }
    Ok(RadarMeasurement {
        noise: SpdMatrix::from_diagonal(&[sigma_r2, sigma_theta2])?,
    })
}

impl RadarMeasurement {
    /// Inverts a noisy polar measurement into a Cartesian position.
    pub fn to_cartesian(y: &DVector<f64>) -> [f64; 2] {
        [y[0] * y[1].cos(), y[0] * y[1].sin()]
    }
}

impl MeasurementModel for RadarMeasurement {
    fn state_dim(&self) -> usize {
        4
    }

    fn obs_dim(&self) -> usize {
        2
    }

    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::from_column_slice(&[x[0].hypot(x[2]), x[2].atan2(x[0])]))
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let r = x[0].hypot(x[2]);
        if r < 1e-9 {
            return Err(FilterError::SingularPoint("radar range below 1e-9".into()));
        }
        let r2 = r * r;
        Ok(DMatrix::from_row_slice(
            2,
            4,
            &[
                x[0] / r,
                0.0,
                x[2] / r,
                0.0,
                -x[2] / r2,
                0.0,
                x[0] / r2,
                0.0,
            ],
        ))
    }

    fn noise(&self) -> &SpdMatrix {
        &self.noise
    }

    fn wrap_flags(&self) -> Vec<bool> {
        vec![false, true]
    }
}

/// Positions of the sensors in a range-only network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorLayout {
    pub positions: Vec<[f64; 2]>,
    pub active_per_step: usize,
}

impl SensorLayout {
    pub fn new(positions: Vec<[f64; 2]>, active_per_step: usize) -> Result<Self> {
        if active_per_step > positions.len() || active_per_step == 0 {
            return Err(FilterError::ConfigError(format!(
                "{active_per_step} active sensors out of {}",
                positions.len()
            )));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(FilterError::NonFinite("sensor positions"));
        }
        Ok(SensorLayout {
            positions,
            active_per_step,
        })
    }

    /// `count` sensors uniform on the square `[lo, hi]^2`.
    pub fn uniform_square<R: Rng + ?Sized>(
        count: usize,
        active_per_step: usize,
        lo: [f64; 2],
        side: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let positions = (0..count)
            .map(|_| {
                [
                    lo[0] + side * rng.random::<f64>(),
                    lo[1] + side * rng.random::<f64>(),
                ]
            })
            .collect();
        Self::new(positions, active_per_step)
    }

    /// Indices of the `active_per_step` sensors closest to `target`, nearest first.
    pub fn nearest(&self, target: [f64; 2]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.positions.len()).collect();
        let dist = |i: usize| {
            let p = self.positions[i];
            (p[0] - target[0]).hypot(p[1] - target[1])
        };
        idx.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
        idx.truncate(self.active_per_step);
        idx
    }

    /// `active_per_step` distinct sensors drawn uniformly, in ascending order.
    pub fn random_subset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut idx = rand::seq::index::sample(rng, self.positions.len(), self.active_per_step).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Ranges from the target position to a set of active sensors.
#[derive(Debug, Clone)]
pub struct SensorMeasurement {
    sensors: Vec<[f64; 2]>,
    noise: SpdMatrix,
}

/// Range-only model for the sensors `active_ids` of `layout`, `R = sigma_r^2 I`.
pub fn sensor_model(
    layout: &SensorLayout,
    active_ids: &[usize],
    sigma_r: f64,
) -> Result<SensorMeasurement> {
    if active_ids.is_empty() || !(sigma_r > 0.0) {
        return Err(FilterError::DomainError(
            "sensor model needs active sensors and sigma_r > 0".into(),
        ));
    }
    let mut seen = active_ids.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != active_ids.len() {
        return Err(FilterError::DomainError("active sensor ids must be distinct".into()));
    }
    let sensors = active_ids
        .iter()
        .map(|&i| {
            layout
                .positions
                .get(i)
                .copied()
                .ok_or_else(|| FilterError::DomainError(format!("sensor {i} not in layout")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensorMeasurement {
        noise: SpdMatrix::scaled_identity(sensors.len(), sigma_r * sigma_r),
        sensors,
    })
}

impl SensorMeasurement {
    pub fn sensors(&self) -> &[[f64; 2]] {
        &self.sensors
    }
}

impl MeasurementModel for SensorMeasurement {
    fn state_dim(&self) -> usize {
        4
    }

    fn obs_dim(&self) -> usize {
        self.sensors.len()
    }

    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::from_iterator(
            self.sensors.len(),
            self.sensors.iter().map(|s| (x[0] - s[0]).hypot(x[2] - s[1])),
        ))
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut jac = DMatrix::zeros(self.sensors.len(), 4);
        for (i, s) in self.sensors.iter().enumerate() {
            let dx = x[0] - s[0];
            let dy = x[2] - s[1];
            let range = dx.hypot(dy);
            if range < 1e-9 {
                return Err(FilterError::SingularPoint(format!(
                    "target coincides with sensor {i}"
                )));
            }
            jac[(i, 0)] = dx / range;
            jac[(i, 2)] = dy / range;
        }
        Ok(jac)
    }

    fn noise(&self) -> &SpdMatrix {
        &self.noise
    }
}

/// A European call/put pair on one underlying.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptionContract {
    pub strike: f64,
    /// Time to maturity as a fraction of a year.
    pub maturity: f64,
    pub spot: f64,
}

impl OptionContract {
    pub fn new(strike: f64, maturity: f64, spot: f64) -> Result<Self> {
        if !(strike > 0.0 && maturity > 0.0 && spot > 0.0) {
            return Err(FilterError::DomainError(format!(
                "option contract needs positive strike, maturity and spot ({strike}, {maturity}, {spot})"
            )));
        }
        Ok(OptionContract {
            strike,
            maturity,
            spot,
        })
    }
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Volatility floor applied when a filter proposes `sigma <= 0`.
pub const SIGMA_FLOOR: f64 = 1e-6;

fn bs_d1_d2(sigma: f64, rate: f64, c: &OptionContract) -> (f64, f64) {
    let sqrt_t = c.maturity.sqrt();
    let d1 = ((c.spot / c.strike).ln() + (rate + 0.5 * sigma * sigma) * c.maturity)
        / (sigma * sqrt_t);
    (d1, d1 - sigma * sqrt_t)
}

fn bs_prices_unchecked(sigma: f64, rate: f64, c: &OptionContract) -> [f64; 2] {
    let (d1, d2) = bs_d1_d2(sigma, rate, c);
    let discounted = c.strike * (-rate * c.maturity).exp();
    [
        c.spot * norm_cdf(d1) - discounted * norm_cdf(d2),
        -c.spot * norm_cdf(-d1) + discounted * norm_cdf(-d2),
    ]
}

/// Black-Scholes call and put prices for the state `[sigma, r]`.
pub fn black_scholes_price(state: &DVector<f64>, contract: &OptionContract) -> Result<[f64; 2]> {
    let (sigma, rate) = (state[0], state[1]);
    if !(sigma > 0.0) {
        return Err(FilterError::DomainError(format!("volatility {sigma} <= 0")));
    }
    if !(contract.maturity > 0.0) {
        return Err(FilterError::DomainError("maturity must be positive".into()));
    }
    Ok(bs_prices_unchecked(sigma, rate, contract))
}

/// How [`BlackScholesMeasurement`] differentiates `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianMode {
    #[default]
    ClosedForm,
    FiniteDifference,
}

/// Call and put prices as a measurement of `[sigma, r]`.
///
/// Evaluation clamps `sigma` to [`SIGMA_FLOOR`] and counts the clamp events.
#[derive(Debug)]
pub struct BlackScholesMeasurement {
    contract: OptionContract,
    noise: SpdMatrix,
    mode: JacobianMode,
    clamps: AtomicUsize,
}

/// Black-Scholes measurement model with `R = sigma_r^2 I_2`.
pub fn black_scholes_model(
    contract: OptionContract,
    sigma_r: f64,
    mode: JacobianMode,
) -> Result<BlackScholesMeasurement> {
    let contract = OptionContract::new(contract.strike, contract.maturity, contract.spot)?;
    if !(sigma_r > 0.0) {
        return Err(FilterError::DomainError("sigma_r must be positive".into()));
    }
    Ok(BlackScholesMeasurement {
        contract,
        noise: SpdMatrix::scaled_identity(2, sigma_r * sigma_r),
        mode,
        clamps: AtomicUsize::new(0),
    })
}

impl BlackScholesMeasurement {
    pub fn contract(&self) -> &OptionContract {
        &self.contract
    }

    /// Number of evaluations that had to clamp the volatility.
    pub fn clamp_events(&self) -> usize {
        self.clamps.load(Ordering::Relaxed)
    }

    fn clamped_sigma(&self, sigma: f64) -> f64 {
        if sigma > SIGMA_FLOOR {
            sigma
        } else {
            self.clamps.fetch_add(1, Ordering::Relaxed);
            SIGMA_FLOOR
        }
    }

    fn closed_form_jacobian(&self, sigma: f64, rate: f64) -> DMatrix<f64> {
        let c = &self.contract;
        let (d1, d2) = bs_d1_d2(sigma, rate, c);
        let vega = c.spot * norm_pdf(d1) * c.maturity.sqrt();
        let k = c.strike * c.maturity * (-rate * c.maturity).exp();
        DMatrix::from_row_slice(2, 2, &[vega, k * norm_cdf(d2), vega, -k * norm_cdf(-d2)])
    }

    fn fd_jacobian(&self, sigma: f64, rate: f64) -> DMatrix<f64> {
        let c = &self.contract;
        let hs = 1e-6 * sigma.abs().max(1e-2);
        let hr = 1e-6;
        let ps = bs_prices_unchecked((sigma + hs).max(SIGMA_FLOOR), rate, c);
        let ms = bs_prices_unchecked((sigma - hs).max(SIGMA_FLOOR), rate, c);
        let pr = bs_prices_unchecked(sigma, rate + hr, c);
        let mr = bs_prices_unchecked(sigma, rate - hr, c);
        let span_s = (sigma + hs).max(SIGMA_FLOOR) - (sigma - hs).max(SIGMA_FLOOR);
        DMatrix::from_fn(2, 2, |i, j| {
            if j == 0 {
                (ps[i] - ms[i]) / span_s
            } else {
                (pr[i] - mr[i]) / (2.0 * hr)
            }
        })
    }
}

impl MeasurementModel for BlackScholesMeasurement {
    fn state_dim(&self) -> usize {
        2
    }

    fn obs_dim(&self) -> usize {
        2
    }

    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let sigma = self.clamped_sigma(x[0]);
        let [call, put] = bs_prices_unchecked(sigma, x[1], &self.contract);
        Ok(DVector::from_column_slice(&[call, put]))
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let sigma = self.clamped_sigma(x[0]);
        Ok(match self.mode {
            JacobianMode::ClosedForm => self.closed_form_jacobian(sigma, x[1]),
            JacobianMode::FiniteDifference => self.fd_jacobian(sigma, x[1]),
        })
    }

    fn noise(&self) -> &SpdMatrix {
        &self.noise
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn central_fd(model: &dyn MeasurementModel, x: &DVector<f64>, step: f64) -> DMatrix<f64> {
        let p = model.obs_dim();
        let d = model.state_dim();
        let mut jac = DMatrix::zeros(p, d);
        for j in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += step;
            xm[j] -= step;
            let diff = model.residual(&model.eval(&xp).unwrap(), &model.eval(&xm).unwrap());
            jac.set_column(j, &(diff / (2.0 * step)));
        }
        jac
    }

    #[test]
    fn cv_matrices_at_unit_step() {
        let dyn_ = cv_dynamics(1.0, 1e-2).unwrap();
        let f = dyn_.transition();
        assert_eq!(f.view((0, 0), (2, 2)), DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]));
        let q = dyn_.process_noise();
        let expected = [0.0025, 0.005, 0.005, 0.01];
        for (got, want) in q.view((0, 0), (2, 2)).transpose().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(q.view((2, 2), (2, 2)), q.view((0, 0), (2, 2)));
        assert_eq!(q[(0, 2)], 0.0);
    }

    #[test]
    fn cv_noise_factor_reproduces_q() {
        for (dt, s) in [(1.0, 1e-2), (0.5, 3.0), (2.0, 1e-3)] {
            let dyn_ = cv_dynamics(dt, s).unwrap();
            let g = &dyn_.noise_factor;
            assert!((g * g.transpose() - dyn_.process_noise()).amax() < 1e-14);
        }
    }

    #[test]
    fn cv_propagates_unit_velocity() {
        let dyn_ = cv_dynamics(1.0, 0.7).unwrap();
        let x = DVector::from_column_slice(&[0.0, 1.0, 0.0, 2.0]);
        assert_eq!(dyn_.propagate(&x).as_slice(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn radar_evaluation_at_45_degrees() {
        let radar = radar_model(0.1, 0.01).unwrap();
        let y = radar
            .eval(&DVector::from_column_slice(&[1000.0, 10.0, 1000.0, 10.0]))
            .unwrap();
        assert!((y[0] - 1414.213_562_373_095).abs() < 1e-9);
        assert!((y[1] - 0.785_398_163_397_448_3).abs() < 1e-12);
        let r = radar.noise().matrix();
        assert_eq!((r[(0, 0)], r[(1, 1)], r[(0, 1)]), (0.1, 0.01, 0.0));
    }

    #[test]
    fn radar_jacobian_matches_finite_differences() {
        let radar = radar_model(0.1, 0.01).unwrap();
        let x = DVector::from_column_slice(&[3.0, 0.0, 4.0, 0.0]);
        let fd = central_fd(&radar, &x, 1e-5);
        assert!((radar.jacobian(&x).unwrap() - fd).amax() < 1e-6);
    }

    #[test]
    fn radar_jacobian_singular_at_origin() {
        let radar = radar_model(0.1, 0.01).unwrap();
        assert!(matches!(
            radar.jacobian(&DVector::zeros(4)),
            Err(FilterError::SingularPoint(_))
        ));
    }

    #[test]
    fn bearing_residual_is_wrapped() {
        let radar = radar_model(0.1, 0.01).unwrap();
        let y = DVector::from_column_slice(&[10.0, PI - 0.01]);
        let y_hat = DVector::from_column_slice(&[10.0, -PI + 0.01]);
        assert!((radar.residual(&y, &y_hat)[1] + 0.02).abs() < 1e-12);
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
    }

    #[test]
    fn sensor_range_and_noise() {
        let layout = SensorLayout::new(vec![[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [5.0, 5.0]], 3)
            .unwrap();
        let one = sensor_model(&layout, &[0], 20.0).unwrap();
        let y = one.eval(&DVector::from_column_slice(&[3.0, 0.0, 4.0, 0.0])).unwrap();
        assert!((y[0] - 5.0).abs() < 1e-12);
        let three = sensor_model(&layout, &[0, 1, 2], 20.0).unwrap();
        assert_eq!(three.noise().matrix(), &(DMatrix::identity(3, 3) * 400.0));
        assert!(sensor_model(&layout, &[0, 0], 20.0).is_err());
        assert!(sensor_model(&layout, &[7], 20.0).is_err());
    }

    #[test]
    fn sensor_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layout =
            SensorLayout::uniform_square(200, 3, [900.0, 900.0], 300.0, &mut rng).unwrap();
        for _ in 0..5 {
            let x = DVector::from_fn(4, |i, _| {
                if i % 2 == 0 {
                    900.0 + 300.0 * rng.random::<f64>()
                } else {
                    rng.random::<f64>()
                }
            });
            let ids = layout.nearest([x[0], x[2]]);
            let model = sensor_model(&layout, &ids, 20.0).unwrap();
            let fd = central_fd(&model, &x, 1e-5);
            assert!((model.jacobian(&x).unwrap() - fd).amax() < 1e-6);
        }
    }

    #[test]
    fn sensor_on_target_is_singular() {
        let layout = SensorLayout::new(vec![[1.0, 2.0], [5.0, 5.0]], 1).unwrap();
        let model = sensor_model(&layout, &[0], 1.0).unwrap();
        assert!(matches!(
            model.jacobian(&DVector::from_column_slice(&[1.0, 0.0, 2.0, 0.0])),
            Err(FilterError::SingularPoint(_))
        ));
    }

    #[test]
    fn nearest_sensors_are_sorted() {
        let layout =
            SensorLayout::new(vec![[0.0, 0.0], [3.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 3).unwrap();
        assert_eq!(layout.nearest([0.9, 0.0]), vec![2, 0, 3]);
    }

    #[test]
    fn at_the_money_prices() {
        let c = OptionContract::new(100.0, 1.0, 100.0).unwrap();
        let [call, put] = black_scholes_price(&DVector::from_column_slice(&[0.2, 0.0]), &c).unwrap();
        // 100 (2 Phi(0.1) - 1), Phi(0.1) = 0.539827837277029
        let expected = 100.0 * (2.0 * 0.539_827_837_277_029 - 1.0);
        assert!((call - expected).abs() < 1e-9);
        assert!((put - expected).abs() < 1e-9);
        assert!((call - 7.9656).abs() < 1e-4);
    }

    #[test]
    fn deep_in_the_money_limit() {
        let c = OptionContract::new(100.0, 1.0, 110.0).unwrap();
        let [call, put] =
            black_scholes_price(&DVector::from_column_slice(&[1e-4, 0.0]), &c).unwrap();
        assert!((call - 10.0).abs() < 1e-3);
        assert!(put.abs() < 1e-3);
    }

    #[test]
    fn nonpositive_volatility_is_rejected_and_clamped() {
        let c = OptionContract::new(100.0, 0.5, 100.0).unwrap();
        assert!(black_scholes_price(&DVector::from_column_slice(&[0.0, 0.01]), &c).is_err());
        let model = black_scholes_model(c, 1e-2, JacobianMode::ClosedForm).unwrap();
        let y = model.eval(&DVector::from_column_slice(&[-0.1, 0.01])).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
        assert_eq!(model.clamp_events(), 1);
    }

    #[test]
    fn black_scholes_noise_and_jacobian() {
        let c = OptionContract::new(100.0, 0.5, 103.0).unwrap();
        let model = black_scholes_model(c, 1e-2, JacobianMode::ClosedForm).unwrap();
        assert!((model.noise().matrix() - DMatrix::identity(2, 2) * 1e-4).amax() < 1e-18);
        let x = DVector::from_column_slice(&[0.2, 0.05]);
        let fd = central_fd(&model, &x, 1e-6);
        assert!((model.jacobian(&x).unwrap() - &fd).amax() < 1e-5);
        let fd_model = black_scholes_model(c, 1e-2, JacobianMode::FiniteDifference).unwrap();
        assert!((fd_model.jacobian(&x).unwrap() - fd).amax() < 1e-5);
    }

    #[test]
    fn random_walk_dynamics() {
        let d = LinearDynamics::random_walk(2, 1e-2).unwrap();
        assert_eq!(d.transition(), &DMatrix::<f64>::identity(2, 2));
        assert!((d.process_noise() - DMatrix::identity(2, 2) * 1e-4).amax() < 1e-18);
    }

    #[test]
    fn indefinite_process_noise_is_rejected() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(LinearDynamics::new(DMatrix::identity(2, 2), q).is_err());
    }
}
