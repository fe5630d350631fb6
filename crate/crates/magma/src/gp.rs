//! Gaussian process and multivariate-normal primitives.
//!
//! Everything downstream (EM training, trajectory prediction, evaluation)
//! is built on the four operations in this module: covariance matrix
//! construction, jittered Cholesky factorization, Gaussian log-density,
//! and Gaussian conditioning. All solves go through [`safe_cholesky`];
//! explicit matrix inversion is reserved for test oracles.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for the symmetry precondition on factorized matrices.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Jitter schedule, as multiples of the mean diagonal of the matrix being
/// factorized. Tried in order; the first factorization that succeeds wins.
pub const JITTER_SCHEDULE: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

/// Relative tolerance for `L·Lᵀ` reconstruction checks (used by tests).
pub const RECONSTRUCTION_TOL: f64 = 1e-5;

fn ensure_finite(xs: &[f64], what: &str) -> Result<()> {
    if let Some(x) = xs.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput(format!("{what} contains {x}")));
    }
    Ok(())
}

/// A stationary covariance function on the real line, parameterized by
/// positive hyperparameters. Implementations expose the derivative of the
/// covariance with respect to each log-hyperparameter so that marginal
/// likelihoods can be optimized in unconstrained log space.
pub trait Kernel {
    fn value(&self, x: f64, y: f64) -> f64;

    /// Number of log-hyperparameters.
    fn n_hyper(&self) -> usize;

    /// d value / d log(hyperparameter_j), written into `out`.
    fn grad_log_hyper(&self, x: f64, y: f64, out: &mut [f64]);
}

/// Exponentiated-quadratic kernel hyperparameters:
/// `k(x, y) = variance · exp(−(x − y)² / (2 · lengthscale²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernelParams")]
pub struct KernelParams {
    variance: f64,
    lengthscale: f64,
}

#[derive(Deserialize)]
struct RawKernelParams {
    variance: f64,
    lengthscale: f64,
}

impl TryFrom<RawKernelParams> for KernelParams {
    type Error = Error;
    fn try_from(raw: RawKernelParams) -> Result<Self> {
        KernelParams::new(raw.variance, raw.lengthscale)
    }
}

impl KernelParams {
    pub fn new(variance: f64, lengthscale: f64) -> Result<Self> {
        if !(variance.is_finite() && variance > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "kernel variance must be finite and positive, got {variance}"
            )));
        }
        if !(lengthscale.is_finite() && lengthscale > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "kernel lengthscale must be finite and positive, got {lengthscale}"
            )));
        }
        Ok(Self {
            variance,
            lengthscale,
        })
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }
}

impl Kernel for KernelParams {
    fn value(&self, x: f64, y: f64) -> f64 {
        let d = x - y;
        self.variance * (-d * d / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }

    fn n_hyper(&self) -> usize {
        2
    }

    fn grad_log_hyper(&self, x: f64, y: f64, out: &mut [f64]) {
        let d = x - y;
        let k = self.value(x, y);
        out[0] = k;
        out[1] = k * d * d / (self.lengthscale * self.lengthscale);
    }
}

/// Observation-noise variance added to the diagonal of an individual's
/// covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNoiseParams")]
pub struct NoiseParams {
    noise_variance: f64,
}

#[derive(Deserialize)]
struct RawNoiseParams {
    noise_variance: f64,
}

impl TryFrom<RawNoiseParams> for NoiseParams {
    type Error = Error;
    fn try_from(raw: RawNoiseParams) -> Result<Self> {
        NoiseParams::new(raw.noise_variance)
    }
}

impl NoiseParams {
    pub fn new(noise_variance: f64) -> Result<Self> {
        if !(noise_variance.is_finite() && noise_variance > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise variance must be finite and positive, got {noise_variance}"
            )));
        }
        Ok(Self { noise_variance })
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }
}

/// A finite-dimensional Gaussian belief: mean vector plus covariance matrix.
///
/// The covariance must be symmetric within [`SYMMETRY_TOL`]; positive
/// semi-definiteness is enforced lazily by [`safe_cholesky`] wherever the
/// distribution is actually used.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != covariance.ncols() {
            return Err(Error::DimensionMismatch {
                context: "GaussianDist covariance",
                expected: covariance.nrows(),
                actual: covariance.ncols(),
            });
        }
        if mean.len() != covariance.nrows() {
            return Err(Error::DimensionMismatch {
                context: "GaussianDist mean",
                expected: covariance.nrows(),
                actual: mean.len(),
            });
        }
        check_symmetric(&covariance)?;
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (m[(i, j)] - m[(j, i)]).abs();
            if d > worst {
                worst = d;
            }
        }
    }
    if worst > SYMMETRY_TOL {
        return Err(Error::NotSymmetric {
            dim: n,
            max_abs_diff: worst,
        });
    }
    Ok(())
}

/// Replaces `m` with `(m + mᵀ)/2`. Matrices assembled from solves pick up
/// rounding asymmetry that would otherwise trip the symmetry precondition.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Covariance matrix of `kernel` between two sets of input locations.
/// Entry `(i, j)` is `kernel.value(xs[i], ys[j])`; when `xs` and `ys` are the
/// same locations the result is exactly symmetric.
pub fn kernel_matrix<K: Kernel>(kernel: &K, xs: &[f64], ys: &[f64]) -> Result<DMatrix<f64>> {
    ensure_finite(xs, "kernel_matrix xs")?;
    ensure_finite(ys, "kernel_matrix ys")?;
    Ok(DMatrix::from_fn(xs.len(), ys.len(), |i, j| {
        kernel.value(xs[i], ys[j])
    }))
}

/// Lower-triangular Cholesky factor of `m + jitter·I`, together with the
/// jitter that was required.
#[derive(Debug)]
pub struct CholeskyFactor {
    inner: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    jitter: f64,
}

impl CholeskyFactor {
    /// The jitter added to the diagonal before factorization succeeded.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn lower(&self) -> DMatrix<f64> {
        self.inner.l()
    }

    /// Solves `(m + jitter·I) x = b`.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.inner.solve(b)
    }

    /// Solves `(m + jitter·I) X = B` column by column.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.inner.solve(b)
    }

    /// `(m + jitter·I)⁻¹`, symmetrized.
    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.inner.inverse();
        symmetrize(&mut inv);
        inv
    }

    /// `log det(m + jitter·I)`, from the factor diagonal.
    pub fn log_det(&self) -> f64 {
        let l = self.inner.l_dirty();
        let mut acc = 0.0;
        for i in 0..l.nrows() {
            acc += l[(i, i)].ln();
        }
        2.0 * acc
    }
}

/// Cholesky factorization with an escalating jitter schedule.
///
/// The matrix must be symmetric within [`SYMMETRY_TOL`]. Factorization is
/// attempted with each jitter from [`JITTER_SCHEDULE`] (scaled by the mean
/// diagonal) in turn; failure at the largest jitter is reported as a
/// non-positive-definite error carrying the attempted jitters.
pub fn safe_cholesky(m: &DMatrix<f64>) -> Result<CholeskyFactor> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::DimensionMismatch {
            context: "safe_cholesky",
            expected: n,
            actual: m.ncols(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyInput("safe_cholesky of a 0x0 matrix".into()));
    }
    check_symmetric(m)?;

    let scale = m.diagonal().sum() / n as f64;
    let scale = if scale.is_finite() && scale > 0.0 {
        scale
    } else {
        1.0
    };
    let mut attempted = Vec::with_capacity(JITTER_SCHEDULE.len());
    for factor in JITTER_SCHEDULE {
        let jitter = factor * scale;
        attempted.push(jitter);
        let candidate = if jitter == 0.0 {
            m.clone()
        } else {
            let mut c = m.clone();
            for i in 0..n {
                c[(i, i)] += jitter;
            }
            c
        };
        if let Some(chol) = nalgebra::Cholesky::new(candidate) {
            return Ok(CholeskyFactor {
                inner: chol,
                jitter,
            });
        }
    }
    Err(Error::NotPositiveDefinite {
        dim: n,
        jitters: attempted,
    })
}

/// Log-density of `y` under the Gaussian `dist`, computed through
/// [`safe_cholesky`]:
/// `−½·(y−μ)ᵀΣ⁻¹(y−μ) − ½·log det Σ − (n/2)·log 2π`.
pub fn mvn_logpdf(y: &DVector<f64>, dist: &GaussianDist) -> Result<f64> {
    let n = dist.dim();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            context: "mvn_logpdf",
            expected: n,
            actual: y.len(),
        });
    }
    let chol = safe_cholesky(dist.covariance())?;
    let r = y - dist.mean();
    let quad = r.dot(&chol.solve_vec(&r));
    Ok(-0.5 * (quad + chol.log_det() + n as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// Gaussian conditioning within one joint distribution.
///
/// `joint` covers a set of indices; `target_idx` selects the block to
/// predict and `observed_idx` the block that was measured (the two may
/// overlap). Observation noise is added to the observed block's diagonal:
///
/// `mean_A + Σ_AB (Σ_BB + σ²I)⁻¹ (y_B − mean_B)`,
/// `Σ_AA − Σ_AB (Σ_BB + σ²I)⁻¹ Σ_BA`.
pub fn gp_condition(
    joint: &GaussianDist,
    target_idx: &[usize],
    observed_idx: &[usize],
    observed_values: &[f64],
    noise: &NoiseParams,
) -> Result<GaussianDist> {
    let n = joint.dim();
    if observed_idx.is_empty() {
        return Err(Error::EmptyInput("gp_condition observed block".into()));
    }
    if observed_values.len() != observed_idx.len() {
        return Err(Error::DimensionMismatch {
            context: "gp_condition observed values",
            expected: observed_idx.len(),
            actual: observed_values.len(),
        });
    }
    for &i in target_idx.iter().chain(observed_idx) {
        if i >= n {
            return Err(Error::DimensionMismatch {
                context: "gp_condition index",
                expected: n,
                actual: i,
            });
        }
    }
    ensure_finite(observed_values, "gp_condition observed values")?;

    let na = target_idx.len();
    let nb = observed_idx.len();
    let cov = joint.covariance();
    let mean = joint.mean();

    let mut sig_bb = DMatrix::from_fn(nb, nb, |i, j| cov[(observed_idx[i], observed_idx[j])]);
    for i in 0..nb {
        sig_bb[(i, i)] += noise.noise_variance();
    }
    let sig_ab = DMatrix::from_fn(na, nb, |i, j| cov[(target_idx[i], observed_idx[j])]);
    let sig_aa = DMatrix::from_fn(na, na, |i, j| cov[(target_idx[i], target_idx[j])]);

    let chol = safe_cholesky(&sig_bb)?;
    let resid = DVector::from_fn(nb, |i, _| observed_values[i] - mean[observed_idx[i]]);
    let mean_a = DVector::from_fn(na, |i, _| mean[target_idx[i]]) + &sig_ab * chol.solve_vec(&resid);
    let mut cov_a = sig_aa - &sig_ab * chol.solve_mat(&sig_ab.transpose());
    symmetrize(&mut cov_a);
    GaussianDist::new(mean_a, cov_a)
}
