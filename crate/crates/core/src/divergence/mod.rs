//! Gaussian filters that minimize a divergence to the exact posterior:
//! forward KL by stochastic search, reverse KL by moment matching, and the
//! alpha family in between, plus confidence-driven sample sizing.

pub mod adaptive;
pub mod elbo;
pub mod moment;
pub mod skf;

pub use adaptive::{
    adaptive_update, confidence_radius, estimator_covariance, min_sample_size,
    radius_from_covariance, AdaptiveOutcome, AdaptivePolicy,
};
pub use elbo::{elbo_objective, entropy, expected_log_prior, QuadratureGrid};
pub use moment::{akf_update, mkf_update, tilted_weights, MomentOutcome, TiltedWeights};
pub use skf::{
    elbo_gradient, optimal_cv_scale, sampled_terms, skf_update, ControlVariate, ElboGradient,
    SkfConfig, SkfOutcome,
};
