//! Brute-force reference computations for tests: dense-grid posterior
//! moments, finite-difference gradients, a textbook Kalman filter, and the
//! information-form updates that the joint-Gaussian filters must agree with.
//!
//! Nothing here shares code with the production update paths beyond the
//! measurement models themselves.

use nalgebra::{DMatrix, DVector};

use crate::error::{FilterError, Result};
use crate::gaussian::GaussianBelief;
use crate::models::MeasurementModel;

/// Axis-aligned integration grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub center: DVector<f64>,
    /// Half width per axis, in state units.
    pub half_widths: Vec<f64>,
    pub points: Vec<usize>,
}

impl GridSpec {
    /// `center +- k * sd` per axis, taken from a belief's marginals.
    pub fn around(belief: &GaussianBelief, k: f64, points: usize) -> Result<Self> {
        let d = belief.dim();
        if d > 2 {
            return Err(FilterError::DomainError(format!("grid oracle supports d <= 2, got {d}")));
        }
        if points < 201 {
            return Err(FilterError::DomainError(format!("grid needs >= 201 points per axis, got {points}")));
        }
        Ok(GridSpec {
            center: belief.mean.clone(),
            half_widths: (0..d).map(|i| k * belief.cov.matrix()[(i, i)].sqrt()).collect(),
            points: vec![points; d],
        })
    }

    /// Default resolution: 2001 points for d = 1, 401 x 401 for d = 2, at +-8 sd.
    pub fn default_for(belief: &GaussianBelief) -> Result<Self> {
        let n = if belief.dim() == 1 { 2001 } else { 401 };
        Self::around(belief, 8.0, n)
    }

    pub fn refined(&self) -> Self {
        GridSpec {
            center: self.center.clone(),
            half_widths: self.half_widths.clone(),
            points: self.points.iter().map(|n| 2 * n - 1).collect(),
        }
    }

    fn axis(&self, i: usize) -> Vec<f64> {
        let n = self.points[i];
        let lo = self.center[i] - self.half_widths[i];
        let h = 2.0 * self.half_widths[i] / (n - 1) as f64;
        (0..n).map(|k| lo + k as f64 * h).collect()
    }

    fn nodes(&self) -> Vec<DVector<f64>> {
        match self.center.len() {
            1 => self.axis(0).into_iter().map(|v| DVector::from_element(1, v)).collect(),
            2 => {
                let (a, b) = (self.axis(0), self.axis(1));
                b.iter()
                    .flat_map(|&v| a.iter().map(move |&u| DVector::from_column_slice(&[u, v])))
                    .collect()
            }
            d => panic!("grid of dimension {d}"),
        }
    }
}

fn gauss_log_density(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let inv = cov.clone().try_inverse().expect("covariance invertible");
    let dx = x - mean;
    let d = mean.len() as f64;
    -0.5 * (dx.transpose() * inv * &dx)[(0, 0)]
        - 0.5 * (d * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln())
}

/// Normalized mean and covariance of
/// `[p(y|x) p(x)]^alpha q(x)^(1-alpha)` on a grid (`alpha = 1`, no `q` for the
/// plain posterior).
pub fn grid_posterior_moments(
    prior: &GaussianBelief,
    model: &dyn MeasurementModel,
    y: &DVector<f64>,
    grid: &GridSpec,
    alpha: Option<f64>,
    tilt_q: Option<&GaussianBelief>,
) -> Result<GaussianBelief> {
    let d = prior.dim();
    if d > 2 || grid.center.len() != d {
        return Err(FilterError::DomainError(format!("grid oracle supports d <= 2, got {d}")));
    }
    let a = alpha.unwrap_or(1.0);
    let prior_cov = prior.cov.matrix().clone();
    let nodes = grid.nodes();
    let log_f = nodes
        .iter()
        .map(|x| {
            let mut lf = a * (model.log_likelihood(x, y)? + gauss_log_density(&prior.mean, &prior_cov, x));
            if let Some(q) = tilt_q {
                lf += (1.0 - a) * gauss_log_density(&q.mean, q.cov.matrix(), x);
            }
            Ok(lf)
        })
        .collect::<Result<Vec<f64>>>()?;
    let max = log_f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_f.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut mean = DVector::zeros(d);
    for (x, wi) in nodes.iter().zip(&w) {
        mean += x * (*wi / total);
    }
    let mut cov = DMatrix::zeros(d, d);
    for (x, wi) in nodes.iter().zip(&w) {
        let dx = x - &mean;
        cov += &dx * dx.transpose() * (*wi / total);
    }
    GaussianBelief::from_parts(mean, cov)
}

/// Finite-difference gradient with respect to the mean and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FdGradient {
    pub mean: DVector<f64>,
    /// Symmetric matrix of partials; an off-diagonal entry is half the
    /// derivative along the symmetric perturbation `E_ij + E_ji`.
    pub cov: DMatrix<f64>,
}

/// Central differences of `f` at `at`, perturbing each mean component and
/// each covariance entry pair symmetrically.
pub fn fd_gradient<F>(mut f: F, at: &GaussianBelief, step: f64) -> Result<FdGradient>
where
    F: FnMut(&GaussianBelief) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(FilterError::DomainError(format!("step {step} outside [1e-7, 1e-3]")));
    }
    let d = at.dim();
    let base_cov = at.cov.matrix().clone();
    let mut mean = DVector::zeros(d);
    for i in 0..d {
        let mut plus = at.mean.clone();
        let mut minus = at.mean.clone();
        plus[i] += step;
        minus[i] -= step;
        let fp = f(&GaussianBelief::new(plus, at.cov.clone())?)?;
        let fm = f(&GaussianBelief::new(minus, at.cov.clone())?)?;
        mean[i] = (fp - fm) / (2.0 * step);
    }
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let mut e = DMatrix::zeros(d, d);
            e[(i, j)] = step;
            e[(j, i)] = step;
            let fp = f(&GaussianBelief::from_parts(at.mean.clone(), &base_cov + &e)?)?;
            let fm = f(&GaussianBelief::from_parts(at.mean.clone(), &base_cov - &e)?)?;
            let g = (fp - fm) / (2.0 * step);
            if i == j {
                cov[(i, i)] = g;
            } else {
                cov[(i, j)] = 0.5 * g;
                cov[(j, i)] = 0.5 * g;
            }
        }
    }
    Ok(FdGradient { mean, cov })
}

/// Textbook Kalman recursion with explicit inverses. Returns the filtered
/// belief after each measurement.
pub fn reference_kf(
    ys: &[DVector<f64>],
    f: &DMatrix<f64>,
    q: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    init_mean: &DVector<f64>,
    init_cov: &DMatrix<f64>,
) -> Result<Vec<GaussianBelief>> {
    let mut m = init_mean.clone();
    let mut p = init_cov.clone();
    let mut out = Vec::with_capacity(ys.len());
    for y in ys {
        let m_pred = f * &m;
        let p_pred = f * &p * f.transpose() + q;
        let s = h * &p_pred * h.transpose() + r;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| FilterError::DomainError("innovation covariance singular".into()))?;
        let k = &p_pred * h.transpose() * s_inv;
        m = &m_pred + &k * (y - h * &m_pred);
        let eye = DMatrix::<f64>::identity(m.len(), m.len());
        p = (&eye - &k * h) * &p_pred;
        p = (&p + p.transpose()) * 0.5;
        out.push(GaussianBelief::from_parts(m.clone(), p.clone())?);
    }
    Ok(out)
}

fn inv(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .try_inverse()
        .ok_or_else(|| FilterError::DomainError("matrix singular".into()))
}

/// Posterior covariance of the variational fixed point when `Sigma_yy` is
/// decomposed as `Sigma_yx Sigma_xx^{-1} Sigma_xy + R`:
/// `[Sxx^{-1} + Sxx^{-1} Sxy R^{-1} Syx Sxx^{-1}]^{-1}`.
pub fn information_form_covariance(
    sigma_xx: &DMatrix<f64>,
    sigma_xy: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let sxx_inv = inv(sigma_xx)?;
    let a = &sxx_inv * sigma_xy;
    inv(&(&sxx_inv + &a * inv(r)? * a.transpose()))
}

/// Matching mean: `mu + Sigma_post Sxx^{-1} Sxy R^{-1} (y - mu_y)`.
pub fn information_form_mean(
    mean: &DVector<f64>,
    sigma_xx: &DMatrix<f64>,
    sigma_xy: &DMatrix<f64>,
    r: &DMatrix<f64>,
    innovation: &DVector<f64>,
) -> Result<DVector<f64>> {
    let post = information_form_covariance(sigma_xx, sigma_xy, r)?;
    Ok(mean + post * inv(sigma_xx)? * sigma_xy * inv(r)? * innovation)
}

/// Fixed point of the bound with `h` linearized at the prior mean:
/// `Sigma = (P^{-1} + H^T R^{-1} H)^{-1}`,
/// `mu = Sigma (P^{-1} m + H^T R^{-1} y~)`, `y~ = y - h(m) + H m`.
pub fn linearized_fixed_point(
    prior: &GaussianBelief,
    model: &dyn MeasurementModel,
    y: &DVector<f64>,
) -> Result<GaussianBelief> {
    let m = &prior.mean;
    let h = model.jacobian(m)?;
    let r_inv = inv(model.noise().matrix())?;
    let p_inv = inv(prior.cov.matrix())?;
    let y_tilde = y - model.eval(m)? + &h * m;
    let cov = inv(&(&p_inv + h.transpose() * &r_inv * &h))?;
    let mean = &cov * (&p_inv * m + h.transpose() * &r_inv * y_tilde);
    GaussianBelief::from_parts(mean, (&cov + cov.transpose()) * 0.5)
}
