//! Dense Gaussian primitives shared by every filter.
//!
//! Covariances are carried as [`SpdMatrix`], which keeps the lower Cholesky
//! factor alongside the matrix. Every covariance assembled from arithmetic
//! goes through [`cholesky`], which symmetrizes first and applies a single
//! diagonal jitter of `1e-9 * trace / d` before giving up.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FilterError, Result};

/// Smallest admissible Cholesky pivot.
pub const PIVOT_FLOOR: f64 = 1e-12;
/// Relative jitter added to the diagonal on the single retry.
pub const JITTER_SCALE: f64 = 1e-9;
/// Relative asymmetry tolerated on input to [`cholesky`].
pub const SYMMETRY_TOL: f64 = 1e-8;

/// A symmetric positive definite matrix together with its lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    matrix: DMatrix<f64>,
    factor: DMatrix<f64>,
    jittered: bool,
}

/// Replaces `m` by `(m + m^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn factorize(m: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, (usize, f64)> {
    let n = m.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut pivot = m[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > PIVOT_FLOOR) {
            return Err((j, pivot));
        }
        let diag = pivot.sqrt();
        l[(j, j)] = diag;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / diag;
        }
    }
    Ok(l)
}

/// Factorizes a symmetric positive definite matrix.
///
/// The input is symmetrized first. On failure the diagonal is inflated once by
/// `1e-9 * trace(m) / d` and the factorization retried.
pub fn cholesky(m: &DMatrix<f64>) -> Result<SpdMatrix> {
    let (rows, cols) = m.shape();
    if rows != cols {
        return Err(FilterError::NotSquare { rows, cols });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(FilterError::NonFinite("covariance"));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let asymmetry = (m - m.transpose()).amax();
    if asymmetry > SYMMETRY_TOL * scale {
        return Err(FilterError::NotSymmetric { asymmetry });
    }
    let sym = symmetrize(m);
    match factorize(&sym) {
        Ok(factor) => Ok(SpdMatrix {
            matrix: sym,
            factor,
            jittered: false,
        }),
        Err(_) => {
            let n = sym.nrows().max(1);
            let jitter = JITTER_SCALE * sym.trace() / n as f64;
            let mut inflated = sym;
            if jitter > 0.0 {
                for i in 0..inflated.nrows() {
                    inflated[(i, i)] += jitter;
                }
            }
            factorize(&inflated)
                .map(|factor| SpdMatrix {
                    matrix: inflated,
                    factor,
                    jittered: true,
                })
                .map_err(|(index, pivot)| FilterError::NotPositiveDefinite { index, pivot })
        }
    }
}

impl SpdMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        cholesky(&m)
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn scaled_identity(dim: usize, value: f64) -> Self {
        assert!(value > 0.0, "scaled identity needs a positive scale");
        SpdMatrix {
            matrix: DMatrix::identity(dim, dim) * value,
            factor: DMatrix::identity(dim, dim) * value.sqrt(),
            jittered: false,
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        cholesky(&DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Lower-triangular `L` with `L L^T = matrix()`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// True when the factorization needed the diagonal jitter.
    pub fn jittered(&self) -> bool {
        self.jittered
    }

    /// `L^{-1} b`.
    pub fn whiten(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    /// `M^{-1} b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let z = self.whiten(b);
        self.factor
            .tr_solve_lower_triangular(&z)
            .expect("cholesky factor has a positive diagonal")
    }

    /// `M^{-1} B`.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let z = self
            .factor
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal");
        self.factor
            .tr_solve_lower_triangular(&z)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        symmetrize(&self.solve_matrix(&DMatrix::identity(self.dim(), self.dim())))
    }

    /// `b^T M^{-1} b`.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        self.whiten(b).norm_squared()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.factor.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Returns `c * M` (c > 0) reusing the factor.
    pub fn scaled(&self, c: f64) -> Self {
        assert!(c > 0.0, "scale must be positive");
        SpdMatrix {
            matrix: &self.matrix * c,
            factor: &self.factor * c.sqrt(),
            jittered: self.jittered,
        }
    }
}

/// A multivariate normal `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: SpdMatrix,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: SpdMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(FilterError::DimensionMismatch {
                expected: cov.dim(),
                actual: mean.len(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(FilterError::NonFinite("mean"));
        }
        Ok(GaussianBelief { mean, cov })
    }

    /// Builds a belief from a raw covariance, factorizing it on the way.
    pub fn from_parts(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(mean, cholesky(&cov)?)
    }

    pub fn from_slices(mean: &[f64], cov_diag: &[f64]) -> Result<Self> {
        Self::new(
            DVector::from_column_slice(mean),
            SpdMatrix::from_diagonal(cov_diag)?,
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        log_density(self, x)
    }

    /// Squared Mahalanobis distance of `x` from the mean.
    pub fn mahalanobis_sq(&self, x: &DVector<f64>) -> f64 {
        self.cov.quad_form(&(x - &self.mean))
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<DVector<f64>> {
        mvn_sample(self, count, rng)
    }
}

/// Draws `count` vectors `mean + L z` with `z` standard normal.
pub fn mvn_sample<R: Rng + ?Sized>(
    belief: &GaussianBelief,
    count: usize,
    rng: &mut R,
) -> Vec<DVector<f64>> {
    let d = belief.dim();
    let l = belief.cov.factor();
    (0..count)
        .map(|_| {
            let z = DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal));
            &belief.mean + l * z
        })
        .collect()
}

/// `ln N(x; mean, cov)` evaluated through the Cholesky factor.
pub fn log_density(belief: &GaussianBelief, x: &DVector<f64>) -> f64 {
    let d = belief.dim() as f64;
    -0.5 * belief.mahalanobis_sq(x) - 0.5 * (d * (2.0 * PI).ln() + belief.cov.log_det())
}

/// Particles with nonnegative importance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEnsemble {
    particles: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

impl WeightedEnsemble {
    pub fn new(particles: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        if particles.len() != weights.len() {
            return Err(FilterError::DimensionMismatch {
                expected: particles.len(),
                actual: weights.len(),
            });
        }
        if particles.is_empty() {
            return Err(FilterError::DegenerateEnsemble("no particles".into()));
        }
        let d = particles[0].len();
        if let Some(p) = particles.iter().find(|p| p.len() != d) {
            return Err(FilterError::DimensionMismatch {
                expected: d,
                actual: p.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(FilterError::DegenerateEnsemble(
                "weights must be finite and nonnegative".into(),
            ));
        }
        Ok(WeightedEnsemble { particles, weights })
    }

    pub fn uniform(particles: Vec<DVector<f64>>) -> Result<Self> {
        let n = particles.len();
        Self::new(particles, vec![1.0 / n.max(1) as f64; n])
    }

    /// Exponentiates log-weights after subtracting their maximum.
    ///
    /// `NaN` log-weights are treated as `-inf`. Fails with
    /// [`FilterError::WeightCollapse`] when no weight is finite.
    pub fn from_log_weights(particles: Vec<DVector<f64>>, log_weights: &[f64]) -> Result<Self> {
        let max = log_weights
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(FilterError::WeightCollapse);
        }
        let weights = log_weights
            .iter()
            .map(|&lw| if lw.is_nan() { 0.0 } else { (lw - max).exp() })
            .collect();
        Self::new(particles, weights)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles[0].len()
    }

    pub fn particles(&self) -> &[DVector<f64>] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        let total = self.total();
        self.weights.iter().map(|w| w / total).collect()
    }

    /// Effective sample size `1 / sum(w_hat^2)`.
    pub fn ess(&self) -> f64 {
        let total = self.total();
        let sq: f64 = self.weights.iter().map(|w| (w / total).powi(2)).sum();
        1.0 / sq
    }

    /// Self-normalized weighted mean.
    pub fn mean(&self) -> Result<DVector<f64>> {
        let total = self.total();
        if !(total > 0.0) {
            return Err(FilterError::DegenerateEnsemble("total weight is zero".into()));
        }
        let mut mean = DVector::zeros(self.dim());
        for (x, w) in self.particles.iter().zip(&self.weights) {
            mean.axpy(*w / total, x, 1.0);
        }
        Ok(mean)
    }

    pub fn into_parts(self) -> (Vec<DVector<f64>>, Vec<f64>) {
        (self.particles, self.weights)
    }
}

/// Self-normalized weighted mean and covariance of an ensemble, as a Gaussian.
pub fn weighted_moments(ens: &WeightedEnsemble) -> Result<GaussianBelief> {
    let mean = ens.mean()?;
    let total = ens.total();
    let d = ens.dim();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for (x, w) in ens.particles.iter().zip(&ens.weights) {
        if *w == 0.0 {
            continue;
        }
        let dx = x - &mean;
        cov.ger(*w / total, &dx, &dx, 1.0);
    }
    let cov = cholesky(&symmetrize(&cov)).map_err(|e| {
        FilterError::DegenerateEnsemble(format!("weighted covariance not factorizable: {e}"))
    })?;
    GaussianBelief::new(mean, cov)
}

/// Chi-squared CDF with `dof` degrees of freedom.
pub fn chi2_cdf(dof: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    statrs::function::gamma::gamma_lr(dof as f64 / 2.0, x / 2.0)
}

fn chi2_quantile_uncached(dof: usize, p: f64) -> f64 {
    let mut hi = dof as f64 + 1.0;
    while chi2_cdf(dof, hi) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(dof, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Quantile function of the chi-squared distribution, cached per `(dof, p)`.
pub fn chi2_quantile(dof: usize, p: f64) -> Result<f64> {
    if dof == 0 {
        return Err(FilterError::DomainError("chi-squared needs dof >= 1".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(FilterError::DomainError(format!(
            "probability {p} outside (0, 1)"
        )));
    }
    static CACHE: OnceLock<Mutex<HashMap<(usize, u64), f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (dof, p.to_bits());
    if let Some(q) = cache.lock().expect("quantile cache poisoned").get(&key) {
        return Ok(*q);
    }
    let q = chi2_quantile_uncached(dof, p);
    cache
        .lock()
        .expect("quantile cache poisoned")
        .insert(key, q);
    Ok(q)
}
