use nalgebra::DVector;
use rand::Rng;

use crate::error::{FilterError, Result};
use crate::gaussian::{weighted_moments, GaussianBelief, WeightedEnsemble};
use crate::models::MeasurementModel;

/// Importance weights for the tilted target `[p(y|x) p(x)]^alpha q(x)^(1-alpha)`
/// under proposal `pi`.
#[derive(Debug, Clone)]
pub struct TiltedWeights {
    pub alpha: f64,
    pub proposal: GaussianBelief,
    pub ensemble: WeightedEnsemble,
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(FilterError::DomainError(format!("alpha must lie in (0, 1], got {alpha}")))
    }
}

/// Log-space weights for given particles.
#[allow(clippy::too_many_arguments)]
pub fn tilted_weights(
    prior: &GaussianBelief,
    model: &dyn MeasurementModel,
    y: &DVector<f64>,
    alpha: f64,
    q_init: &GaussianBelief,
    proposal: &GaussianBelief,
    particles: Vec<DVector<f64>>,
) -> Result<TiltedWeights> {
    check_alpha(alpha)?;
    let log_w = particles
        .iter()
        .map(|x| {
            let mut lw = alpha * (model.log_likelihood(x, y)? + prior.log_density(x))
                - proposal.log_density(x);
            if alpha < 1.0 {
                lw += (1.0 - alpha) * q_init.log_density(x);
            }
            Ok(lw)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TiltedWeights {
        alpha,
        proposal: proposal.clone(),
        ensemble: WeightedEnsemble::from_log_weights(particles, &log_w)?,
    })
}

/// Result of a moment-matching update.
#[derive(Debug, Clone)]
pub struct MomentOutcome {
    pub belief: GaussianBelief,
    /// The ensemble could not support a covariance and the prior was returned.
    pub degenerate: bool,
    pub ess: f64,
    pub samples: usize,
}

/// Weighted moments of a weight set, falling back to the prior when the
/// ensemble is degenerate.
pub fn match_moments(weights: &TiltedWeights, prior: &GaussianBelief) -> Result<MomentOutcome> {
    let ess = weights.ensemble.ess();
    let samples = weights.ensemble.len();
    match weighted_moments(&weights.ensemble) {
        Ok(belief) if belief.mean.iter().all(|v| v.is_finite()) => Ok(MomentOutcome {
            belief,
            degenerate: false,
            ess,
            samples,
        }),
        Ok(_) | Err(FilterError::DegenerateEnsemble(_)) => Ok(MomentOutcome {
            belief: prior.clone(),
            degenerate: true,
            ess,
            samples,
        }),
        Err(e) => Err(e),
    }
}

#[allow(clippy::too_many_arguments)]
fn draw_and_match<R: Rng + ?Sized>(
    prior: &GaussianBelief,
    model: &dyn MeasurementModel,
    y: &DVector<f64>,
    alpha: f64,
    samples: usize,
    q_init: &GaussianBelief,
    proposal: &GaussianBelief,
    rng: &mut R,
) -> Result<MomentOutcome> {
    check_alpha(alpha)?;
    if samples < prior.dim() + 1 {
        return Err(FilterError::ConfigError(format!(
            "moment matching needs at least d + 1 = {} samples, got {samples}",
            prior.dim() + 1
        )));
    }
    let particles = proposal.sample(samples, rng);
    match tilted_weights(prior, model, y, alpha, q_init, proposal, particles) {
        Ok(w) => match_moments(&w, prior),
        Err(FilterError::WeightCollapse) => Ok(MomentOutcome {
            belief: prior.clone(),
            degenerate: true,
            ess: 0.0,
            samples,
        }),
        Err(e) => Err(e),
    }
}

/// Reverse-KL update: self-normalized importance-sampled posterior moments.
pub fn mkf_update<R: Rng + ?Sized>(
    prior: &GaussianBelief,
    model: &dyn MeasurementModel,
    y: &DVector<f64>,
    samples: usize,
    proposal: &GaussianBelief,
    rng: &mut R,
) -> Result<MomentOutcome> {
    draw_and_match(prior, model, y, 1.0, samples, prior, proposal, rng)
}

/// Alpha-divergence update: one pass of moment matching against the tilted
/// density `p(x|y)^alpha q_init(x)^(1-alpha)`.
#[allow(clippy::too_many_arguments)]
pub fn akf_update<R: Rng + ?Sized>(
    prior: &GaussianBelief,
    model: &dyn MeasurementModel,
    y: &DVector<f64>,
    alpha: f64,
    samples: usize,
    q_init: &GaussianBelief,
    proposal: &GaussianBelief,
    rng: &mut R,
) -> Result<MomentOutcome> {
    draw_and_match(prior, model, y, alpha, samples, q_init, proposal, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::SpdMatrix;
    use crate::models::{FnMeasurement, LinearMeasurement};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_1d() -> LinearMeasurement {
        LinearMeasurement::new(DMatrix::identity(1, 1), SpdMatrix::identity(1)).unwrap()
    }

    #[test]
    fn prior_proposal_weights_are_likelihoods() {
        let prior = GaussianBelief::from_slices(&[0.0], &[1.0]).unwrap();
        let model = linear_1d();
        let y = DVector::from_element(1, 2.0);
        let xs: Vec<_> = [-1.0, 0.0, 1.5].iter().map(|&v| DVector::from_element(1, v)).collect();
        let w = tilted_weights(&prior, &model, &y, 1.0, &prior, &prior, xs.clone()).unwrap();
        let norm = w.ensemble.normalized_weights();
        let lik: Vec<f64> = xs.iter().map(|x| model.log_likelihood(x, &y).unwrap().exp()).collect();
        let total: f64 = lik.iter().sum();
        for (a, b) in norm.iter().zip(&lik) {
            assert!((a - b / total).abs() < 1e-12);
        }
        let half = tilted_weights(&prior, &model, &y, 0.5, &prior, &prior, xs.clone()).unwrap();
        let lik_half: Vec<f64> = lik.iter().map(|l| l.sqrt()).collect();
        let total: f64 = lik_half.iter().sum();
        for (a, b) in half.ensemble.normalized_weights().iter().zip(&lik_half) {
            assert!((a - b / total).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_one_reproduces_mkf() {
        let prior = GaussianBelief::from_slices(&[0.0], &[1.0]).unwrap();
        let q0 = GaussianBelief::from_slices(&[3.0], &[0.1]).unwrap();
        let model = FnMeasurement::square(0.1);
        let y = DVector::from_element(1, 1.0);
        let a = mkf_update(&prior, &model, &y, 1000, &prior, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = akf_update(&prior, &model, &y, 1.0, 1000, &q0, &prior, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a.belief, b.belief);
    }

    #[test]
    fn conjugate_case() {
        let prior = GaussianBelief::from_slices(&[0.0], &[1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let out = mkf_update(&prior, &linear_1d(), &DVector::from_element(1, 2.0), 100_000, &prior, &mut rng)
            .unwrap();
        assert!((out.belief.mean[0] - 1.0).abs() < 0.02);
        assert!((out.belief.cov.matrix()[(0, 0)] - 0.5).abs() < 0.02);
        assert!(!out.degenerate);
    }

    #[test]
    fn alpha_outside_range_rejected() {
        let prior = GaussianBelief::from_slices(&[0.0], &[1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y = DVector::from_element(1, 0.0);
        for alpha in [0.0, -0.5, 1.5] {
            assert!(akf_update(&prior, &linear_1d(), &y, alpha, 100, &prior, &prior, &mut rng).is_err());
        }
    }

    #[test]
    fn impossible_measurement_falls_back_to_prior() {
        let prior = GaussianBelief::from_slices(&[0.0], &[1.0]).unwrap();
        let model =
            LinearMeasurement::new(DMatrix::identity(1, 1), SpdMatrix::scaled_identity(1, 1e-300))
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let out = mkf_update(&prior, &model, &DVector::from_element(1, 1e200), 50, &prior, &mut rng)
            .unwrap();
        assert!(out.degenerate);
        assert_eq!(out.belief, prior);
    }
}
