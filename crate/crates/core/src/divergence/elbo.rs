use std::f64::consts::{E, PI};

use nalgebra::DVector;

use crate::error::{FilterError, Result};
use crate::gaussian::GaussianBelief;
use crate::models::MeasurementModel;

/// Tensor grid over whitened coordinates of a Gaussian, used for expectations
/// in one or two dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureGrid {
    pub points_per_axis: usize,
    /// Half width of the grid in standard deviations.
    pub half_width: f64,
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        QuadratureGrid {
            points_per_axis: 2001,
            half_width: 8.0,
        }
    }
}

impl QuadratureGrid {
    pub fn for_dim(dim: usize) -> Self {
        let points_per_axis = if dim <= 1 { 2001 } else { 401 };
        QuadratureGrid {
            points_per_axis,
            half_width: 8.0,
        }
    }

    /// `E_q[g(x)]`, with the standard-normal weights renormalized over the grid.
    pub fn expectation<F>(&self, q: &GaussianBelief, mut g: F) -> Result<f64>
    where
        F: FnMut(&DVector<f64>) -> Result<f64>,
    {
        let d = q.dim();
        if d == 0 || d > 2 {
            return Err(FilterError::DomainError(format!(
                "grid quadrature supports d <= 2, got d = {d}"
            )));
        }
        let n = self.points_per_axis.max(3);
        let h = 2.0 * self.half_width / (n - 1) as f64;
        let nodes: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let z = -self.half_width + i as f64 * h;
                (z, (-0.5 * z * z).exp())
            })
            .collect();
        let l = q.cov.factor();
        let mut num = 0.0;
        let mut den = 0.0;
        let mut z = DVector::zeros(d);
        let outer = if d == 2 { n } else { 1 };
        for j in 0..outer {
            for &(zi, wi) in &nodes {
                z[0] = zi;
                let mut w = wi;
                if d == 2 {
                    z[1] = nodes[j].0;
                    w *= nodes[j].1;
                }
                let x = &q.mean + l * &z;
                num += w * g(&x)?;
                den += w;
            }
        }
        Ok(num / den)
    }
}

/// `E_q[ln p(x)]` for Gaussian `q` and prior `p`.
pub fn expected_log_prior(q: &GaussianBelief, prior: &GaussianBelief) -> f64 {
    let d = q.dim() as f64;
    let dm = &q.mean - &prior.mean;
    let trace = prior.cov.solve_matrix(q.cov.matrix()).trace();
    -0.5 * (trace + prior.cov.quad_form(&dm)) - 0.5 * (d * (2.0 * PI).ln() + prior.cov.log_det())
}

/// Differential entropy `1/2 ln |2 pi e Sigma|`.
pub fn entropy(q: &GaussianBelief) -> f64 {
    0.5 * (q.dim() as f64 * (2.0 * PI * E).ln() + q.cov.log_det())
}

/// Evidence lower bound `E_q[ln p(y|x)] + E_q[ln p(x)] + H[q]`.
///
/// The likelihood term is integrated numerically; the rest is closed form.
pub fn elbo_objective(
    q: &GaussianBelief,
    prior: &GaussianBelief,
    model: &dyn MeasurementModel,
    y: &DVector<f64>,
    grid: &QuadratureGrid,
) -> Result<f64> {
    let likelihood = grid.expectation(q, |x| model.log_likelihood(x, y))?;
    Ok(likelihood + expected_log_prior(q, prior) + entropy(q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adf::ekf_update;
    use crate::gaussian::SpdMatrix;
    use crate::models::{FnMeasurement, LinearMeasurement};
    use nalgebra::DMatrix;

    fn linear_1d() -> LinearMeasurement {
        LinearMeasurement::new(DMatrix::identity(1, 1), SpdMatrix::identity(1)).unwrap()
    }

    #[test]
    fn exact_posterior_attains_log_evidence() {
        let prior = GaussianBelief::from_slices(&[0.0], &[1.0]).unwrap();
        let y = DVector::from_element(1, 2.0);
        let post = GaussianBelief::from_slices(&[1.0], &[0.5]).unwrap();
        let elbo = elbo_objective(&post, &prior, &linear_1d(), &y, &QuadratureGrid::default())
            .unwrap();
        // y ~ N(0, 2)
        let evidence = -0.5 * (2.0 * PI * 2.0).ln() - 4.0 / 4.0;
        assert!((elbo - evidence).abs() < 1e-6);
    }

    #[test]
    fn exact_posterior_is_the_maximizer() {
        let prior = GaussianBelief::from_parts(
            DVector::from_column_slice(&[0.5, -0.2]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]),
        )
        .unwrap();
        let model = LinearMeasurement::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.5]),
            SpdMatrix::scaled_identity(1, 0.5),
        )
        .unwrap();
        let y = DVector::from_element(1, 1.3);
        let grid = QuadratureGrid {
            points_per_axis: 121,
            half_width: 8.0,
        };
        let post = ekf_update(&prior, &model, &y).unwrap();
        let best = elbo_objective(&post, &prior, &model, &y, &grid).unwrap();
        for k in 0..50 {
            let t = k as f64;
            let mean = &post.mean + DVector::from_column_slice(&[0.1 * t.sin(), 0.1 * t.cos()]);
            let scale = 1.0 + 0.2 * (0.7 * t).sin();
            let cov = post.cov.matrix() * scale
                + DMatrix::from_row_slice(2, 2, &[0.0, 0.02, 0.02, 0.0]) * (0.3 * t).cos();
            let q = GaussianBelief::from_parts(mean, cov).unwrap();
            assert!(elbo_objective(&q, &prior, &model, &y, &grid).unwrap() <= best + 1e-9);
        }
    }

    #[test]
    fn square_model_matches_riemann_sum() {
        let prior = GaussianBelief::from_slices(&[0.0], &[1.0]).unwrap();
        let q = prior.clone();
        let model = FnMeasurement::square(0.1);
        let y = DVector::from_element(1, 1.0);
        let elbo = elbo_objective(&q, &prior, &model, &y, &QuadratureGrid::default()).unwrap();
        // independent midpoint rule on the full integrand q (ln p(y,x) - ln q)
        let n = 200_000;
        let (lo, hi) = (-12.0, 12.0);
        let h = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let x: f64 = lo + (i as f64 + 0.5) * h;
            let lq = -0.5 * x * x - 0.5 * (2.0 * PI).ln();
            let lp = lq;
            let ll = -0.5 * (1.0 - x * x).powi(2) / 0.1 - 0.5 * (2.0 * PI * 0.1).ln();
            acc += lq.exp() * (ll + lp - lq) * h;
        }
        assert!((elbo - acc).abs() < 1e-6, "{elbo} vs {acc}");
    }

    #[test]
    fn grid_rejects_three_dimensions() {
        let q = GaussianBelief::from_slices(&[0.0; 3], &[1.0; 3]).unwrap();
        assert!(matches!(
            QuadratureGrid::default().expectation(&q, |_| Ok(0.0)),
            Err(FilterError::DomainError(_))
        ));
    }
}
