//! A uniform predict/update interface over every filter in the crate.

use std::fmt;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adf::{default_ukf_lambda, ekf_update, predict, ukf_update};
use crate::divergence::{
    adaptive_update, akf_update, mkf_update, skf_update, AdaptivePolicy, SkfConfig,
};
use crate::error::{FilterError, Result};
use crate::gaussian::{GaussianBelief, SpdMatrix};
use crate::models::{LinearDynamics, MeasurementModel};
use crate::particle::{pf_step, ParticleState};

/// Importance proposal for the moment-matching filters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum Proposal {
    /// The predicted prior `p(x_t | y_{1:t-1})`.
    #[default]
    Prior,
    /// UKF posterior from the same prior, covariance scaled by `inflation`.
    Ukf { inflation: f64 },
    /// EKF posterior from the same prior, covariance scaled by `inflation`.
    Ekf { inflation: f64 },
}

impl Proposal {
    pub fn build(
        &self,
        prior: &GaussianBelief,
        model: &dyn MeasurementModel,
        y: &DVector<f64>,
    ) -> Result<GaussianBelief> {
        let inflated = |post: GaussianBelief, inflation: f64| {
            if !(inflation > 0.0) {
                return Err(FilterError::ConfigError(
                    "proposal inflation must be positive".into(),
                ));
            }
            GaussianBelief::new(post.mean, post.cov.scaled(inflation))
        };
        match *self {
            Proposal::Prior => Ok(prior.clone()),
            Proposal::Ukf { inflation } => inflated(
                ukf_update(prior, model, y, default_ukf_lambda(prior.dim()))?,
                inflation,
            ),
            Proposal::Ekf { inflation } => inflated(ekf_update(prior, model, y)?, inflation),
        }
    }
}

/// Which filter to run, with its tuning.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterSpec {
    Ekf,
    Ukf { lambda: Option<f64> },
    Pf { particles: usize },
    Skf(SkfConfig),
    Mkf {
        samples: usize,
        proposal: Proposal,
        adaptive: Option<AdaptivePolicy>,
    },
    Akf {
        alpha: f64,
        samples: usize,
        proposal: Proposal,
        adaptive: Option<AdaptivePolicy>,
    },
}

impl FilterSpec {
    /// Short lowercase label used in result files.
    pub fn name(&self) -> &'static str {
        match self {
            FilterSpec::Ekf => "ekf",
            FilterSpec::Ukf { .. } => "ukf",
            FilterSpec::Pf { .. } => "pf",
            FilterSpec::Skf(_) => "skf",
            FilterSpec::Mkf { .. } => "mkf",
            FilterSpec::Akf { .. } => "akf",
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            FilterSpec::Akf { alpha, .. } => Some(*alpha),
            _ => None,
        }
    }
}

impl fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.alpha() {
            Some(a) => write!(f, "{}({a})", self.name()),
            None => f.write_str(self.name()),
        }
    }
}

/// What happened during one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// A fallback path was taken (weight collapse, degenerate ensemble,
    /// early-stopped ascent).
    pub flagged: bool,
    /// Samples drawn by the update, zero for the analytic filters.
    pub samples: usize,
}

/// A running filter: current belief plus any particle state.
#[derive(Debug, Clone)]
pub struct FilterSession {
    spec: FilterSpec,
    belief: GaussianBelief,
    particles: Option<ParticleState>,
    steps: usize,
    flagged_steps: usize,
}

impl FilterSession {
    pub fn new<R: Rng + ?Sized>(
        spec: FilterSpec,
        init: GaussianBelief,
        dynamics: &LinearDynamics,
        rng: &mut R,
    ) -> Result<Self> {
        let particles = match &spec {
            FilterSpec::Pf { particles } => {
                Some(ParticleState::from_belief(&init, dynamics, *particles, rng)?)
            }
            _ => None,
        };
        Ok(FilterSession {
            spec,
            belief: init,
            particles,
            steps: 0,
            flagged_steps: 0,
        })
    }

    pub fn spec(&self) -> &FilterSpec {
        &self.spec
    }

    /// Posterior after the latest step (the initial belief before any step).
    pub fn belief(&self) -> &GaussianBelief {
        &self.belief
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn flagged_steps(&self) -> usize {
        self.flagged_steps
    }

    /// Predicts through `dynamics` and conditions on `y`.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        dynamics: &LinearDynamics,
        model: &dyn MeasurementModel,
        y: &DVector<f64>,
        rng: &mut R,
    ) -> Result<StepReport> {
        let report = if let Some(state) = &self.particles {
            let out = pf_step(state, dynamics, model, y, rng)?;
            let samples = state.len();
            self.particles = Some(out.state);
            self.belief = out.summary;
            StepReport {
                flagged: out.collapsed,
                samples,
            }
        } else {
            let prior = predict(&self.belief, dynamics)?;
            let (belief, report) = self.update(&prior, model, y, rng)?;
            self.belief = belief;
            report
        };
        self.steps += 1;
        if report.flagged {
            self.flagged_steps += 1;
        }
        Ok(report)
    }

    fn update<R: Rng + ?Sized>(
        &self,
        prior: &GaussianBelief,
        model: &dyn MeasurementModel,
        y: &DVector<f64>,
        rng: &mut R,
    ) -> Result<(GaussianBelief, StepReport)> {
        let analytic = |b| {
            (
                b,
                StepReport {
                    flagged: false,
                    samples: 0,
                },
            )
        };
        match &self.spec {
            FilterSpec::Ekf => Ok(analytic(ekf_update(prior, model, y)?)),
            FilterSpec::Ukf { lambda } => {
                let lambda = lambda.unwrap_or_else(|| default_ukf_lambda(prior.dim()));
                Ok(analytic(ukf_update(prior, model, y, lambda)?))
            }
            FilterSpec::Skf(cfg) => {
                let out = skf_update(prior, model, y, cfg, rng)?;
                Ok((
                    out.belief,
                    StepReport {
                        flagged: out.stopped_early,
                        samples: out.iterations_run * cfg.samples_per_iter,
                    },
                ))
            }
            FilterSpec::Mkf {
                samples,
                proposal,
                adaptive,
            } => moment_update(prior, model, y, 1.0, *samples, proposal, adaptive.as_ref(), rng),
            FilterSpec::Akf {
                alpha,
                samples,
                proposal,
                adaptive,
            } => moment_update(prior, model, y, *alpha, *samples, proposal, adaptive.as_ref(), rng),
            FilterSpec::Pf { .. } => unreachable!("particle filter handled in step"),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn moment_update<R: Rng + ?Sized>(
    prior: &GaussianBelief,
    model: &dyn MeasurementModel,
    y: &DVector<f64>,
    alpha: f64,
    samples: usize,
    proposal: &Proposal,
    adaptive: Option<&AdaptivePolicy>,
    rng: &mut R,
) -> Result<(GaussianBelief, StepReport)> {
    let pi = proposal.build(prior, model, y)?;
    let out = match adaptive {
        Some(policy) => {
            let a = adaptive_update(prior, model, y, alpha, policy, prior, &pi, rng)?;
            a.update
        }
        None if alpha == 1.0 => mkf_update(prior, model, y, samples, &pi, rng)?,
        None => akf_update(prior, model, y, alpha, samples, prior, &pi, rng)?,
    };
    Ok((
        out.belief,
        StepReport {
            flagged: out.degenerate,
            samples: out.samples,
        },
    ))
}

/// Convenience constructor for a diagonal initial belief.
pub fn diagonal_belief(mean: &[f64], variances: &[f64]) -> Result<GaussianBelief> {
    GaussianBelief::new(
        DVector::from_column_slice(mean),
        SpdMatrix::from_diagonal(variances)?,
    )
}
