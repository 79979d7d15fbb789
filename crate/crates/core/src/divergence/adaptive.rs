use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::moment::{match_moments, tilted_weights, MomentOutcome};
use crate::error::{FilterError, Result};
use crate::gaussian::{chi2_quantile, symmetrize, GaussianBelief, WeightedEnsemble};
use crate::models::MeasurementModel;

/// Sample-size policy driven by the confidence radius of the mean estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptivePolicy {
    pub s_base: usize,
    pub r_max_target: f64,
    pub s_floor: usize,
    pub s_cap: usize,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
}

fn default_confidence() -> f64 {
    0.95
}

impl AdaptivePolicy {
    pub fn new(s_base: usize, r_max_target: f64, s_floor: usize, s_cap: usize) -> Result<Self> {
        let policy = AdaptivePolicy {
            s_base,
            r_max_target,
            s_floor,
            s_cap,
            confidence: default_confidence(),
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_floor <= self.s_base && self.s_base <= self.s_cap) {
            return Err(FilterError::ConfigError(format!(
                "adaptive policy needs floor <= base <= cap, got {} / {} / {}",
                self.s_floor, self.s_base, self.s_cap
            )));
        }
        if self.s_floor == 0 {
            return Err(FilterError::ConfigError("adaptive sample floor must be positive".into()));
        }
        if !(self.r_max_target > 0.0 && self.r_max_target.is_finite()) {
            return Err(FilterError::ConfigError("r_max target must be positive".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(FilterError::ConfigError("confidence must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Covariance of the self-normalized mean estimator,
/// `sum_s (w_s / W)^2 (x_s - mu)(x_s - mu)^T`.
pub fn estimator_covariance(ens: &WeightedEnsemble) -> Result<DMatrix<f64>> {
    let mean = ens.mean()?;
    let total = ens.total();
    let d = ens.dim();
    let mut v = DMatrix::zeros(d, d);
    for (x, w) in ens.particles().iter().zip(ens.weights()) {
        let dx = x - &mean;
        v.ger((w / total).powi(2), &dx, &dx, 1.0);
    }
    Ok(symmetrize(&v))
}

/// Major semi-axis of the `p`-confidence ellipsoid of an estimator with
/// covariance `v`.
pub fn radius_from_covariance(v: &DMatrix<f64>, p: f64) -> Result<f64> {
    let lambda = SymmetricEigen::new(symmetrize(v)).eigenvalues.max().max(0.0);
    Ok((lambda * chi2_quantile(v.nrows(), p)?).sqrt())
}

/// Confidence radius of the weighted-mean estimate of `ens`.
pub fn confidence_radius(ens: &WeightedEnsemble, p: f64) -> Result<f64> {
    radius_from_covariance(&estimator_covariance(ens)?, p)
}

/// `clamp(ceil(S_base (r_base / r_target)^2), floor, cap)`.
pub fn min_sample_size(policy: &AdaptivePolicy, r_base: f64) -> usize {
    let ratio = r_base / policy.r_max_target;
    let raw = (policy.s_base as f64 * ratio * ratio).ceil();
    let raw = if raw.is_finite() { raw } else { policy.s_cap as f64 };
    (raw.max(0.0) as usize).clamp(policy.s_floor, policy.s_cap)
}

/// Outcome of an adaptively sized moment-matching update.
#[derive(Debug, Clone)]
pub struct AdaptiveOutcome {
    pub update: MomentOutcome,
    pub r_base: f64,
    pub samples_used: usize,
}

/// Runs a pilot batch of `S_base` draws, sizes the final batch from its
/// confidence radius, then tops up (or truncates) the pilot to that size.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_update<R: Rng + ?Sized>(
    prior: &GaussianBelief,
    model: &dyn MeasurementModel,
    y: &DVector<f64>,
    alpha: f64,
    policy: &AdaptivePolicy,
    q_init: &GaussianBelief,
    proposal: &GaussianBelief,
    rng: &mut R,
) -> Result<AdaptiveOutcome> {
    policy.validate()?;
    let mut particles = proposal.sample(policy.s_base, rng);
    let pilot = tilted_weights(prior, model, y, alpha, q_init, proposal, particles.clone());
    let r_base = match pilot {
        Ok(w) => confidence_radius(&w.ensemble, policy.confidence)?,
        Err(FilterError::WeightCollapse) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    let target = min_sample_size(policy, r_base);
    if target > particles.len() {
        particles.extend(proposal.sample(target - particles.len(), rng));
    } else {
        particles.truncate(target);
    }
    let samples_used = particles.len();
    let update = match tilted_weights(prior, model, y, alpha, q_init, proposal, particles) {
        Ok(w) => match_moments(&w, prior)?,
        Err(FilterError::WeightCollapse) => MomentOutcome {
            belief: prior.clone(),
            degenerate: true,
            ess: 0.0,
            samples: samples_used,
        },
        Err(e) => return Err(e),
    };
    Ok(AdaptiveOutcome {
        update,
        r_base,
        samples_used,
    })
}
