//! Sequential importance resampling particle filter.

use nalgebra::DVector;
use rand::Rng;

use crate::adf::predict;
use crate::error::{FilterError, Result};
use crate::gaussian::{weighted_moments, GaussianBelief, WeightedEnsemble};
use crate::models::{LinearDynamics, MeasurementModel};

/// Particles approximating the predictive density for the next measurement.
#[derive(Debug, Clone)]
pub struct ParticleState {
    pub ensemble: WeightedEnsemble,
    pub step_count: usize,
}

/// Output of one filter step.
#[derive(Debug, Clone)]
pub struct PfStep {
    pub state: ParticleState,
    pub summary: GaussianBelief,
    /// All likelihoods underflowed and the weights were reset to uniform.
    pub collapsed: bool,
}

impl ParticleState {
    /// Draws `count` particles from the one-step prediction of `belief`.
    pub fn from_belief<R: Rng + ?Sized>(
        belief: &GaussianBelief,
        dynamics: &LinearDynamics,
        count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if count == 0 {
            return Err(FilterError::DegenerateEnsemble("no particles".into()));
        }
        let predicted = predict(belief, dynamics)?;
        Ok(ParticleState {
            ensemble: WeightedEnsemble::uniform(predicted.sample(count, rng))?,
            step_count: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.ensemble.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ensemble.is_empty()
    }
}

/// Systematic resampling: one uniform offset, `count` evenly spaced pointers.
pub fn systematic_resample<R: Rng + ?Sized>(
    weights: &[f64],
    count: usize,
    rng: &mut R,
) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let step = total / count as f64;
    let mut pointer = rng.random::<f64>() * step;
    let mut ancestors = Vec::with_capacity(count);
    let mut cumulative = 0.0;
    let mut i = 0;
    for _ in 0..count {
        while i + 1 < weights.len() && cumulative + weights[i] <= pointer {
            cumulative += weights[i];
            i += 1;
        }
        ancestors.push(i);
        pointer += step;
    }
    ancestors
}

/// Weighted mean and covariance, falling back to the unweighted covariance
/// when the weights concentrate on too few particles to factorize.
fn summarize(ens: &WeightedEnsemble) -> Result<GaussianBelief> {
    match weighted_moments(ens) {
        Ok(b) => Ok(b),
        Err(FilterError::DegenerateEnsemble(_)) => {
            let mean = ens.mean()?;
            let spread = weighted_moments(&WeightedEnsemble::uniform(ens.particles().to_vec())?)?;
            GaussianBelief::new(mean, spread.cov)
        }
        Err(e) => Err(e),
    }
}

/// Weights the current particles by `p(y | x)`, summarizes, resamples and
/// propagates them through `N(F x, Q)`.
pub fn pf_step<R: Rng + ?Sized>(
    state: &ParticleState,
    dynamics: &LinearDynamics,
    model: &dyn MeasurementModel,
    y: &DVector<f64>,
    rng: &mut R,
) -> Result<PfStep> {
    let particles = state.ensemble.particles().to_vec();
    let log_w = particles
        .iter()
        .map(|x| model.log_likelihood(x, y))
        .collect::<Result<Vec<_>>>()?;
    let (weighted, collapsed) = match WeightedEnsemble::from_log_weights(particles.clone(), &log_w) {
        Ok(ens) => (ens, false),
        Err(FilterError::WeightCollapse) => (WeightedEnsemble::uniform(particles)?, true),
        Err(e) => return Err(e),
    };
    let summary = summarize(&weighted)?;
    let count = weighted.len();
    let ancestors = systematic_resample(weighted.weights(), count, rng);
    let next = ancestors
        .into_iter()
        .map(|a| dynamics.sample_next(&weighted.particles()[a], rng))
        .collect();
    Ok(PfStep {
        state: ParticleState {
            ensemble: WeightedEnsemble::uniform(next)?,
            step_count: state.step_count + 1,
        },
        summary,
        collapsed,
    })
}
