use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adf::ekf_update;
use crate::error::{FilterError, Result};
use crate::gaussian::{cholesky, symmetrize, GaussianBelief, SpdMatrix};
use crate::models::MeasurementModel;

/// Settings for the stochastic-search update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkfConfig {
    pub samples_per_iter: usize,
    pub iterations: usize,
    /// Step size `rho_i = (offset + i)^(-eta)`.
    pub offset: f64,
    pub eta: f64,
    pub control_variate: bool,
    /// Scale the control variate by `cov(f, g) / var(g)` estimated on each batch.
    pub optimal_scale: bool,
}

impl Default for SkfConfig {
    fn default() -> Self {
        SkfConfig {
            samples_per_iter: 500,
            iterations: 50,
            offset: 10.0,
            eta: 0.8,
            control_variate: true,
            optimal_scale: false,
        }
    }
}

impl SkfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_iter < 2 {
            return Err(FilterError::ConfigError("SKF needs at least 2 samples per iteration".into()));
        }
        if self.iterations == 0 {
            return Err(FilterError::ConfigError("SKF needs at least one iteration".into()));
        }
        if !(self.offset >= 0.0) {
            return Err(FilterError::ConfigError("SKF step offset must be >= 0".into()));
        }
        if !(self.eta > 0.5 && self.eta <= 1.0) {
            return Err(FilterError::ConfigError(format!(
                "SKF step exponent must lie in (0.5, 1], got {}",
                self.eta
            )));
        }
        Ok(())
    }

    pub fn step_size(&self, iteration: usize) -> f64 {
        (self.offset + iteration as f64).powf(-self.eta)
    }
}

/// Log-likelihood kernel with `h` replaced by its linearization at an anchor:
/// `g(x) = -1/2 (y~ - H x)^T R^{-1} (y~ - H x)`, `y~ = y - h(a) + H a`.
#[derive(Debug, Clone)]
pub struct ControlVariate {
    anchor: DVector<f64>,
    jacobian: DMatrix<f64>,
    y_tilde: DVector<f64>,
    noise: SpdMatrix,
}

impl ControlVariate {
    pub fn new(anchor: &DVector<f64>, model: &dyn MeasurementModel, y: &DVector<f64>) -> Result<Self> {
        let jacobian = model.jacobian(anchor)?;
        let h = model.eval(anchor)?;
        // wrapped innovation keeps y~ on the same branch as h near the anchor
        let y_tilde = model.residual(y, &h) + &jacobian * anchor;
        Ok(ControlVariate {
            anchor: anchor.clone(),
            jacobian,
            y_tilde,
            noise: model.noise().clone(),
        })
    }

    pub fn anchor(&self) -> &DVector<f64> {
        &self.anchor
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.jacobian
    }

    pub fn y_tilde(&self) -> &DVector<f64> {
        &self.y_tilde
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        -0.5 * self.noise.quad_form(&(&self.y_tilde - &self.jacobian * x))
    }

    /// `E_q[g]`.
    pub fn expectation(&self, q: &GaussianBelief) -> f64 {
        let hs = &self.jacobian * q.cov.matrix() * self.jacobian.transpose();
        let trace = self.noise.solve_matrix(&hs).trace();
        self.eval(&q.mean) - 0.5 * trace
    }

    /// Gradient of `E_q[g]` in the mean: `H^T R^{-1} (y~ - H mu)`.
    pub fn mean_gradient(&self, mean: &DVector<f64>) -> DVector<f64> {
        self.jacobian.transpose() * self.noise.solve(&(&self.y_tilde - &self.jacobian * mean))
    }

    /// Gradient of `E_q[g]` in the covariance: `-1/2 H^T R^{-1} H`.
    pub fn cov_gradient(&self) -> DMatrix<f64> {
        self.jacobian.transpose() * self.noise.solve_matrix(&self.jacobian) * -0.5
    }
}

/// Gradient of the ELBO with respect to the mean and covariance of `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradient {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Per-sample score-function terms `c(x) * d/dmu ln q(x)` and
/// `c(x) * d/dSigma ln q(x)`, where `c = f - lambda g` (or `f` without a
/// control variate).
pub fn sampled_terms(
    q: &GaussianBelief,
    model: &dyn MeasurementModel,
    y: &DVector<f64>,
    cv: Option<(&ControlVariate, f64)>,
    samples: &[DVector<f64>],
) -> Result<Vec<ElboGradient>> {
    let precision = q.cov.inverse();
    samples
        .iter()
        .map(|x| {
            let f = model.neg_half_quad(x, y)?;
            let c = match cv {
                Some((g, scale)) => f - scale * g.eval(x),
                None => f,
            };
            let score = q.cov.solve(&(x - &q.mean));
            let cov = (&score * score.transpose() - &precision) * (0.5 * c);
            Ok(ElboGradient {
                mean: score * c,
                cov,
            })
        })
        .collect()
}

/// Least-squares control-variate scale `cov(f, g) / var(g)` over a batch.
pub fn optimal_cv_scale(
    model: &dyn MeasurementModel,
    y: &DVector<f64>,
    cv: &ControlVariate,
    samples: &[DVector<f64>],
) -> Result<f64> {
    let pairs = samples
        .iter()
        .map(|x| Ok((model.neg_half_quad(x, y)?, cv.eval(x))))
        .collect::<Result<Vec<_>>>()?;
    let n = pairs.len() as f64;
    let fm = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let gm = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pairs.iter().map(|(f, g)| (f - fm) * (g - gm)).sum();
    let var: f64 = pairs.iter().map(|(_, g)| (g - gm).powi(2)).sum();
    Ok(if var > 0.0 { cov / var } else { 1.0 })
}

/// Monte Carlo estimate of the ELBO gradient at `q`.
///
/// The likelihood part is estimated with score-function samples, optionally
/// corrected by the control variate whose expectation is added back in closed
/// form. Prior and entropy parts are exact.
pub fn elbo_gradient(
    q: &GaussianBelief,
    prior: &GaussianBelief,
    model: &dyn MeasurementModel,
    y: &DVector<f64>,
    cv: Option<(&ControlVariate, f64)>,
    samples: &[DVector<f64>],
) -> Result<ElboGradient> {
    let terms = sampled_terms(q, model, y, cv, samples)?;
    let n = terms.len() as f64;
    let d = q.dim();
    let mut mean = DVector::zeros(d);
    let mut cov = DMatrix::zeros(d, d);
    for t in &terms {
        mean += &t.mean;
        cov += &t.cov;
    }
    mean /= n;
    cov /= n;

    mean += prior.cov.solve(&(&prior.mean - &q.mean));
    cov += (q.cov.inverse() - prior.cov.inverse()) * 0.5;
    if let Some((g, scale)) = cv {
        mean += g.mean_gradient(&q.mean) * scale;
        cov += g.cov_gradient() * scale;
    }
    Ok(ElboGradient { mean, cov })
}

/// Result of a stochastic-search update.
#[derive(Debug, Clone)]
pub struct SkfOutcome {
    pub belief: GaussianBelief,
    pub iterations_run: usize,
    /// The covariance step left the positive-definite cone; the last valid
    /// iterate was kept.
    pub stopped_early: bool,
}

/// Stochastic natural-gradient ascent on the ELBO, started at the EKF
/// posterior. Each iteration re-anchors the control variate at the current
/// mean and takes `mu += rho Sigma grad_mu`, `Sigma += rho Sigma grad_Sigma Sigma`.
pub fn skf_update<R: Rng + ?Sized>(
    prior: &GaussianBelief,
    model: &dyn MeasurementModel,
    y: &DVector<f64>,
    cfg: &SkfConfig,
    rng: &mut R,
) -> Result<SkfOutcome> {
    cfg.validate()?;
    let mut q = ekf_update(prior, model, y)?;
    for i in 1..=cfg.iterations {
        let samples = q.sample(cfg.samples_per_iter, rng);
        let cv = if cfg.control_variate {
            let g = ControlVariate::new(&q.mean, model, y)?;
            let scale = if cfg.optimal_scale {
                optimal_cv_scale(model, y, &g, &samples)?
            } else {
                1.0
            };
            Some((g, scale))
        } else {
            None
        };
        let grad = elbo_gradient(
            &q,
            prior,
            model,
            y,
            cv.as_ref().map(|(g, s)| (g, *s)),
            &samples,
        )?;
        let rho = cfg.step_size(i);
        let sigma = q.cov.matrix();
        let mean = &q.mean + sigma * &grad.mean * rho;
        let cov = sigma + sigma * &grad.cov * sigma * rho;
        let next = if mean.iter().all(|v| v.is_finite()) {
            cholesky(&symmetrize(&cov)).and_then(|c| GaussianBelief::new(mean, c))
        } else {
            Err(FilterError::NonFinite("SKF mean"))
        };
        match next {
            Ok(b) => q = b,
            Err(_) => {
                return Ok(SkfOutcome {
                    belief: q,
                    iterations_run: i - 1,
                    stopped_early: true,
                })
            }
        }
    }
    Ok(SkfOutcome {
        belief: q,
        iterations_run: cfg.iterations,
        stopped_early: false,
    })
}
