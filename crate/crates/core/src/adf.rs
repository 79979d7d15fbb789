//! Joint-Gaussian assumed density filtering.
//!
//! Both the EKF and the UKF reduce to estimating the moments `mu_y`,
//! `Sigma_yy` and `Sigma_xy` of a joint Gaussian over state and measurement,
//! followed by the Gaussian conditioning step in [`joint_gaussian_update`].

use nalgebra::{DMatrix, DVector};

use crate::error::{FilterError, Result};
use crate::gaussian::{cholesky, symmetrize, GaussianBelief, SpdMatrix};
use crate::models::{wrap_angle, LinearDynamics, MeasurementModel};

/// Moments of the measurement under the joint Gaussian assumption.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGaussianStats {
    pub mu_y: DVector<f64>,
    pub sigma_yy: SpdMatrix,
    /// Cross covariance, `d x p`.
    pub sigma_xy: DMatrix<f64>,
}

impl JointGaussianStats {
    pub fn new(mu_y: DVector<f64>, sigma_yy: SpdMatrix, sigma_xy: DMatrix<f64>) -> Result<Self> {
        let p = mu_y.len();
        if sigma_yy.dim() != p {
            return Err(FilterError::DimensionMismatch {
                expected: p,
                actual: sigma_yy.dim(),
            });
        }
        if sigma_xy.ncols() != p {
            return Err(FilterError::DimensionMismatch {
                expected: p,
                actual: sigma_xy.ncols(),
            });
        }
        Ok(JointGaussianStats {
            mu_y,
            sigma_yy,
            sigma_xy,
        })
    }

    /// Kalman gain `Sigma_xy Sigma_yy^{-1}`.
    pub fn gain(&self) -> DMatrix<f64> {
        self.sigma_yy
            .solve_matrix(&self.sigma_xy.transpose())
            .transpose()
    }
}

/// Prediction through linear dynamics: `N(F mu, F Sigma F^T + Q)`.
pub fn predict(prior: &GaussianBelief, dynamics: &LinearDynamics) -> Result<GaussianBelief> {
    if prior.dim() != dynamics.dim() {
        return Err(FilterError::DimensionMismatch {
            expected: dynamics.dim(),
            actual: prior.dim(),
        });
    }
    let f = dynamics.transition();
    let cov = f * prior.cov.matrix() * f.transpose() + dynamics.process_noise();
    GaussianBelief::new(dynamics.propagate(&prior.mean), cholesky(&symmetrize(&cov))?)
}

/// Conditions the joint Gaussian on the observed `y`.
///
/// `wrap` flags measurement components whose innovation is an angle.
pub fn joint_gaussian_update(
    prior: &GaussianBelief,
    stats: &JointGaussianStats,
    y: &DVector<f64>,
    wrap: &[bool],
) -> Result<GaussianBelief> {
    if stats.sigma_xy.nrows() != prior.dim() {
        return Err(FilterError::DimensionMismatch {
            expected: prior.dim(),
            actual: stats.sigma_xy.nrows(),
        });
    }
    if y.len() != stats.mu_y.len() {
        return Err(FilterError::DimensionMismatch {
            expected: stats.mu_y.len(),
            actual: y.len(),
        });
    }
    let mut innovation = y - &stats.mu_y;
    for (i, w) in wrap.iter().enumerate() {
        if *w {
            innovation[i] = wrap_angle(innovation[i]);
        }
    }
    let gain = stats.gain();
    let mean = &prior.mean + &gain * innovation;
    let cov = prior.cov.matrix() - &gain * stats.sigma_yy.matrix() * gain.transpose();
    GaussianBelief::new(mean, cholesky(&symmetrize(&cov))?)
}

/// First-order linearization at the prior mean.
pub fn ekf_stats(prior: &GaussianBelief, model: &dyn MeasurementModel) -> Result<JointGaussianStats> {
    let h = model.jacobian(&prior.mean)?;
    let mu_y = model.eval(&prior.mean)?;
    let sigma_xy = prior.cov.matrix() * h.transpose();
    let sigma_yy = &h * &sigma_xy + model.noise().matrix();
    JointGaussianStats::new(mu_y, cholesky(&symmetrize(&sigma_yy))?, sigma_xy)
}

pub fn ekf_update(
    prior: &GaussianBelief,
    model: &dyn MeasurementModel,
    y: &DVector<f64>,
) -> Result<GaussianBelief> {
    let stats = ekf_stats(prior, model)?;
    joint_gaussian_update(prior, &stats, y, &model.wrap_flags())
}

/// Symmetric sigma-point set with a single weight set.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaPoints {
    pub points: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    pub lambda: f64,
}

/// Default spread: `3 - d`, replaced by `1` once `d >= 3` so the centre
/// weight stays positive.
pub fn default_ukf_lambda(dim: usize) -> f64 {
    if dim >= 3 {
        1.0
    } else {
        3.0 - dim as f64
    }
}

/// `2d + 1` points `mu`, `mu +- [chol((d + lambda) Sigma)]_s`.
pub fn sigma_points(belief: &GaussianBelief, lambda: f64) -> Result<SigmaPoints> {
    let d = belief.dim();
    let spread = d as f64 + lambda;
    if !(spread > 0.0) {
        return Err(FilterError::DomainError(format!(
            "sigma points need d + lambda > 0 (d = {d}, lambda = {lambda})"
        )));
    }
    let root = belief.cov.factor() * spread.sqrt();
    let mut points = Vec::with_capacity(2 * d + 1);
    points.push(belief.mean.clone());
    for s in 0..d {
        points.push(&belief.mean + root.column(s));
    }
    for s in 0..d {
        points.push(&belief.mean - root.column(s));
    }
    let mut weights = vec![1.0 / (2.0 * spread); 2 * d + 1];
    weights[0] = lambda / spread;
    Ok(SigmaPoints {
        points,
        weights,
        lambda,
    })
}

/// Weighted mean with circular averaging on wrapped components.
fn sigma_mean(values: &[DVector<f64>], weights: &[f64], wrap: &[bool]) -> DVector<f64> {
    let p = values[0].len();
    let mut mean = DVector::zeros(p);
    for (v, w) in values.iter().zip(weights) {
        mean.axpy(*w, v, 1.0);
    }
    for i in (0..p).filter(|&i| wrap.get(i).copied().unwrap_or(false)) {
        let (s, c) = values
            .iter()
            .zip(weights)
            .fold((0.0, 0.0), |(s, c), (v, w)| (s + w * v[i].sin(), c + w * v[i].cos()));
        mean[i] = s.atan2(c);
    }
    mean
}

/// Unscented-transform estimate of the joint moments.
pub fn ukf_stats(
    prior: &GaussianBelief,
    model: &dyn MeasurementModel,
    lambda: f64,
) -> Result<JointGaussianStats> {
    let sp = sigma_points(prior, lambda)?;
    let wrap = model.wrap_flags();
    let ys = sp
        .points
        .iter()
        .map(|x| model.eval(x))
        .collect::<Result<Vec<_>>>()?;
    let mu_y = sigma_mean(&ys, &sp.weights, &wrap);
    let p = mu_y.len();
    let d = prior.dim();
    let mut sigma_yy = model.noise().matrix().clone();
    let mut sigma_xy = DMatrix::zeros(d, p);
    for ((x, yv), w) in sp.points.iter().zip(&ys).zip(&sp.weights) {
        let dy = model.residual(yv, &mu_y);
        let dx = x - &prior.mean;
        sigma_yy.ger(*w, &dy, &dy, 1.0);
        sigma_xy.ger(*w, &dx, &dy, 1.0);
    }
    JointGaussianStats::new(mu_y, cholesky(&symmetrize(&sigma_yy))?, sigma_xy)
}

pub fn ukf_update(
    prior: &GaussianBelief,
    model: &dyn MeasurementModel,
    y: &DVector<f64>,
    lambda: f64,
) -> Result<GaussianBelief> {
    let stats = ukf_stats(prior, model, lambda)?;
    joint_gaussian_update(prior, &stats, y, &model.wrap_flags())
}
