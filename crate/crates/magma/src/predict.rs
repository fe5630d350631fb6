//! Trajectory prediction for new or held-out individuals.
//!
//! The trained hyper-posterior acts as a population prior: a new
//! individual's trajectory is the latent mean process plus its own GP, so
//! its observations are conditioned against `K̂ + k_θ*` with observation
//! noise. Individuals whose data already shaped the hyper-posterior must
//! not be conditioned twice; rebuild the hyper-posterior without them first
//! (see `e_step` with the individual removed).

use nalgebra::{DMatrix, DVector};

use crate::data::{Observation, AGE_MATCH_TOL};
use crate::error::{Error, Result};
use crate::gp::{
    gp_condition, kernel_matrix, safe_cholesky, symmetrize, GaussianDist, KernelParams,
    NoiseParams,
};
use crate::optim;
use crate::train::{HpMode, HyperPosterior, IndividualParams, TrainedModel};

/// Two-sided Gaussian quantile for the 95% credible level, pinned to six
/// decimal places for bit-reproducible intervals.
pub const Z_95: f64 = 1.959964;

/// How far beyond the training grid prediction targets may reach (years).
pub const EXTRAPOLATION_MARGIN_YEARS: f64 = 5.0;

/// Central credible interval `mean ± z(level)·√variance`.
///
/// At level 0.95 the quantile is the hard-coded [`Z_95`]; other levels use
/// the standard-normal quantile function. The lower bound is reflected from
/// the upper so the two offsets agree bit-for-bit.
pub fn credible_interval(mean: f64, variance: f64, level: f64) -> Result<(f64, f64)> {
    if !level.is_finite() || level <= 0.0 || level >= 1.0 {
        return Err(Error::InvalidLevel(level));
    }
    if !mean.is_finite() || !variance.is_finite() || variance < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "credible_interval needs finite mean and variance >= 0, got ({mean}, {variance})"
        )));
    }
    let z = if (level - 0.95).abs() < 1e-12 {
        Z_95
    } else {
        use statrs::distribution::ContinuousCDF;
        statrs::distribution::Normal::new(0.0, 1.0)
            .expect("unit normal")
            .inverse_cdf(0.5 + level / 2.0)
    };
    let upper = mean + z * variance.sqrt();
    let lower = 2.0 * mean - upper;
    Ok((lower, upper))
}

/// Predictive mean, variance, and 95% credible band over a set of target
/// ages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPrediction {
    targets: Vec<f64>,
    mean: Vec<f64>,
    variance: Vec<f64>,
    lower95: Vec<f64>,
    upper95: Vec<f64>,
}

impl TrajectoryPrediction {
    fn new(targets: Vec<f64>, mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        let n = targets.len();
        if mean.len() != n || variance.len() != n {
            return Err(Error::DimensionMismatch {
                context: "TrajectoryPrediction",
                expected: n,
                actual: mean.len().min(variance.len()),
            });
        }
        let mut lower95 = Vec::with_capacity(n);
        let mut upper95 = Vec::with_capacity(n);
        for i in 0..n {
            let (lo, hi) = credible_interval(mean[i], variance[i], 0.95)?;
            lower95.push(lo);
            upper95.push(hi);
        }
        Ok(Self {
            targets,
            mean,
            variance,
            lower95,
            upper95,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn lower95(&self) -> &[f64] {
        &self.lower95
    }

    pub fn upper95(&self) -> &[f64] {
        &self.upper95
    }
}

/// Extends the hyper-posterior belief to arbitrary ages by conditioning the
/// mean-process prior on the grid belief (exact under the model). Ages that
/// match grid points are taken from the belief directly.
pub fn extend_hyper_posterior(
    mean_kernel: &KernelParams,
    prior_mean_constant: f64,
    hp: &HyperPosterior,
    points: &[f64],
) -> Result<GaussianDist> {
    let grid = hp.grid();
    let n = points.len();
    if n == 0 {
        return Err(Error::EmptyInput("extend_hyper_posterior points".into()));
    }

    // Split requested points into grid members and genuinely new ages.
    let mut on_grid: Vec<Option<usize>> = Vec::with_capacity(n);
    let mut off: Vec<f64> = Vec::new();
    let mut off_slot: Vec<usize> = Vec::with_capacity(n);
    for &p in points {
        if !p.is_finite() {
            return Err(Error::NonFiniteInput(format!("prediction age {p}")));
        }
        match hp.index_of(p) {
            Some(g) => {
                on_grid.push(Some(g));
                off_slot.push(usize::MAX);
            }
            None => {
                on_grid.push(None);
                off_slot.push(off.len());
                off.push(p);
            }
        }
    }

    let post_mean = hp.mean();
    let post_cov = hp.covariance();
    if off.is_empty() {
        let idx: Vec<usize> = on_grid.iter().map(|g| g.unwrap()).collect();
        let mean = DVector::from_fn(n, |i, _| post_mean[idx[i]]);
        let cov = DMatrix::from_fn(n, n, |i, j| post_cov[(idx[i], idx[j])]);
        return GaussianDist::new(mean, cov);
    }

    let k_gg = kernel_matrix(mean_kernel, grid, grid)?;
    let chol = safe_cholesky(&k_gg)?;
    let c = kernel_matrix(mean_kernel, &off, grid)?;
    // a = C·K₀⁻¹, the prior regression weights of the new ages on the grid.
    let a = chol.solve_mat(&c.transpose()).transpose();
    let centered = post_mean - DVector::from_element(grid.len(), prior_mean_constant);
    let mean_off = &a * &centered + DVector::from_element(off.len(), prior_mean_constant);
    let cross = &a * post_cov; // Cov(new, grid)
    let mut cov_off = kernel_matrix(mean_kernel, &off, &off)? - &a * c.transpose() + &cross * a.transpose();
    symmetrize(&mut cov_off);

    let mean = DVector::from_fn(n, |i, _| match on_grid[i] {
        Some(g) => post_mean[g],
        None => mean_off[off_slot[i]],
    });
    let mut cov = DMatrix::from_fn(n, n, |i, j| match (on_grid[i], on_grid[j]) {
        (Some(gi), Some(gj)) => post_cov[(gi, gj)],
        (Some(gi), None) => cross[(off_slot[j], gi)],
        (None, Some(gj)) => cross[(off_slot[i], gj)],
        (None, None) => cov_off[(off_slot[i], off_slot[j])],
    });
    symmetrize(&mut cov);
    GaussianDist::new(mean, cov)
}

/// Marginal log-likelihood of a new individual's observations under the
/// population prior, as a function of that individual's hyperparameters.
///
/// Coordinates: `z = [ln variance, ln lengthscale, ln noise variance]`.
/// Value: `log N(y; m̂(t), K̂(t,t) + k_θ(t,t) + σ²·I)`.
pub struct NewIndividualObjective {
    y: DVector<f64>,
    prior_mean: DVector<f64>,
    prior_cov: DMatrix<f64>,
    sq: DMatrix<f64>,
}

impl NewIndividualObjective {
    pub fn new(model: &TrainedModel, obs: &[Observation]) -> Result<Self> {
        if obs.is_empty() {
            return Err(Error::EmptyInput("NewIndividualObjective observations".into()));
        }
        let ages: Vec<f64> = obs.iter().map(|o| o.age()).collect();
        let ext = extend_hyper_posterior(
            &model.params.mean_kernel,
            model.params.prior_mean_constant,
            &model.hyper_posterior,
            &ages,
        )?;
        let n = ages.len();
        Ok(Self {
            y: DVector::from_fn(n, |i, _| obs[i].value()),
            prior_mean: ext.mean().clone(),
            prior_cov: ext.covariance().clone(),
            sq: DMatrix::from_fn(n, n, |i, j| {
                let d = ages[i] - ages[j];
                d * d
            }),
        })
    }

    pub fn value(&self, z: &[f64]) -> Result<f64> {
        self.eval(z, false).map(|(v, _)| v)
    }

    pub fn value_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.eval(z, true).map(|(v, g)| (v, g.unwrap()))
    }

    fn eval(&self, z: &[f64], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        for &zi in z {
            if !zi.is_finite() || !zi.exp().is_finite() {
                return Err(Error::NonFiniteInput(format!("log-parameter {zi}")));
            }
        }
        let (variance, lengthscale, noise_var) = (z[0].exp(), z[1].exp(), z[2].exp());
        let n = self.y.len();
        let inv_two_l2 = 1.0 / (2.0 * lengthscale * lengthscale);
        let k_part = self.sq.map(|d2| variance * (-d2 * inv_two_l2).exp());
        let mut cov = &self.prior_cov + &k_part;
        for d in 0..n {
            cov[(d, d)] += noise_var;
        }
        let chol = safe_cholesky(&cov)?;
        let r = &self.y - &self.prior_mean;
        let alpha = chol.solve_vec(&r);
        let value = -0.5
            * (r.dot(&alpha)
                + chol.log_det()
                + n as f64 * (2.0 * std::f64::consts::PI).ln());
        if !want_grad {
            return Ok((value, None));
        }
        let w = chol.inverse();
        let a = &alpha * alpha.transpose() - &w;
        let inv_l2 = 1.0 / (lengthscale * lengthscale);
        let mut grad = [0.0f64; 3];
        for i in 0..n {
            for j in 0..n {
                let aij_kij = a[(i, j)] * k_part[(i, j)];
                grad[0] += 0.5 * aij_kij;
                grad[1] += 0.5 * aij_kij * self.sq[(i, j)] * inv_l2;
            }
            grad[2] += 0.5 * noise_var * a[(i, i)];
        }
        Ok((value, Some(grad.to_vec())))
    }
}

/// A population-typical starting point for a new individual's
/// hyperparameters: the shared set in Common mode, the log-space average of
/// the fitted per-individual sets otherwise.
pub(crate) fn baseline_individual_params(
    model: &TrainedModel,
) -> Result<(KernelParams, NoiseParams)> {
    match &model.params.individual {
        IndividualParams::Shared(k, n) => Ok((*k, *n)),
        IndividualParams::PerIndividual(map) => {
            if map.is_empty() {
                return Err(Error::EmptyInput("per-individual parameter map".into()));
            }
            let n = map.len() as f64;
            let (mut lv, mut ll, mut ls) = (0.0, 0.0, 0.0);
            for (k, s) in map.values() {
                lv += k.variance().ln();
                ll += k.lengthscale().ln();
                ls += s.noise_variance().ln();
            }
            Ok((
                KernelParams::new((lv / n).exp(), (ll / n).exp())?,
                NoiseParams::new((ls / n).exp())?,
            ))
        }
    }
}

/// Fits hyperparameters for an individual unseen in training by maximizing
/// its marginal likelihood under the population prior. Common-mode models
/// bypass the fit and reuse the shared parameters.
pub fn fit_new_individual_hps(
    model: &TrainedModel,
    obs: &[Observation],
) -> Result<(KernelParams, NoiseParams)> {
    if obs.is_empty() {
        return Err(Error::EmptyInput("fit_new_individual_hps observations".into()));
    }
    if model.hp_mode == HpMode::Common {
        return baseline_individual_params(model);
    }
    let (k0, n0) = baseline_individual_params(model)?;
    let obj = NewIndividualObjective::new(model, obs)?;
    let z0 = [
        k0.variance().ln(),
        k0.lengthscale().ln(),
        n0.noise_variance().ln(),
    ];
    let floor = crate::train::VARIANCE_FLOOR.ln();
    let res = optim::maximize_with_restarts(
        |z| obj.value(z),
        |z| obj.value_grad(z),
        &z0,
        &[floor, f64::NEG_INFINITY, floor],
    )?;
    Ok((
        KernelParams::new(res.x[0].exp(), res.x[1].exp())?,
        NoiseParams::new(res.x[2].exp())?,
    ))
}

/// Resolves the individual-level hyperparameters used for a prediction.
/// Returns `(kernel, noise, refit)` where `refit` records whether a
/// per-individual fit ran (as opposed to reusing shared parameters).
pub fn resolve_individual_params(
    model: &TrainedModel,
    obs: &[Observation],
) -> Result<(KernelParams, NoiseParams, bool)> {
    match model.hp_mode {
        HpMode::Common => {
            let (k, n) = baseline_individual_params(model)?;
            Ok((k, n, false))
        }
        HpMode::IndividualSpecific => {
            if obs.is_empty() {
                let (k, n) = baseline_individual_params(model)?;
                Ok((k, n, false))
            } else {
                let (k, n) = fit_new_individual_hps(model, obs)?;
                Ok((k, n, true))
            }
        }
    }
}

fn dedup_sorted(mut xs: Vec<f64>) -> Vec<f64> {
    xs.sort_by(f64::total_cmp);
    xs.dedup_by(|b, a| (*b - *a).abs() <= AGE_MATCH_TOL);
    xs
}

/// Predicts an individual's trajectory at `targets` with explicit
/// individual-level hyperparameters.
///
/// The joint Gaussian over `targets ∪ observed ages` has mean `m̂` and
/// covariance `K̂ + k_θ*`; the observations are then conditioned in with
/// `σ*²` noise. With no observations the population prior itself is
/// returned. `obs` must not already be part of the model's hyper-posterior.
pub fn predict_trajectory_with_params(
    model: &TrainedModel,
    obs: &[Observation],
    targets: &[f64],
    kernel: &KernelParams,
    noise: &NoiseParams,
) -> Result<TrajectoryPrediction> {
    if targets.is_empty() {
        return Err(Error::EmptyInput("prediction targets".into()));
    }
    let grid = model.hyper_posterior.grid();
    let lo = grid[0] - EXTRAPOLATION_MARGIN_YEARS;
    let hi = grid[grid.len() - 1] + EXTRAPOLATION_MARGIN_YEARS;
    for &t in targets {
        if !t.is_finite() {
            return Err(Error::NonFiniteInput(format!("prediction target {t}")));
        }
        if t < lo || t > hi {
            return Err(Error::Extrapolation { age: t, lo, hi });
        }
    }

    let targets = dedup_sorted(targets.to_vec());
    let mut union = targets.clone();
    for o in obs {
        if union
            .iter()
            .all(|&u| (u - o.age()).abs() > AGE_MATCH_TOL)
        {
            union.push(o.age());
        }
    }
    let union = dedup_sorted(union);
    let locate = |age: f64| -> usize {
        union
            .iter()
            .position(|&u| (u - age).abs() <= AGE_MATCH_TOL)
            .expect("member of union")
    };
    let target_idx: Vec<usize> = targets.iter().map(|&t| locate(t)).collect();
    let obs_idx: Vec<usize> = obs.iter().map(|o| locate(o.age())).collect();

    let ext = extend_hyper_posterior(
        &model.params.mean_kernel,
        model.params.prior_mean_constant,
        &model.hyper_posterior,
        &union,
    )?;
    let mut gamma = ext.covariance() + kernel_matrix(kernel, &union, &union)?;
    symmetrize(&mut gamma);

    let (mean, variance) = if obs.is_empty() {
        let mean: Vec<f64> = target_idx.iter().map(|&i| ext.mean()[i]).collect();
        let var: Vec<f64> = target_idx.iter().map(|&i| gamma[(i, i)]).collect();
        (mean, var)
    } else {
        let joint = GaussianDist::new(ext.mean().clone(), gamma)?;
        let values: Vec<f64> = obs.iter().map(|o| o.value()).collect();
        let cond = gp_condition(&joint, &target_idx, &obs_idx, &values, noise)?;
        let mean: Vec<f64> = cond.mean().iter().copied().collect();
        let var: Vec<f64> = (0..target_idx.len())
            .map(|i| cond.covariance()[(i, i)].max(0.0))
            .collect();
        (mean, var)
    };
    TrajectoryPrediction::new(targets, mean, variance)
}

/// Predicts an individual's trajectory, resolving its hyperparameters from
/// the model (shared reuse in Common mode, a marginal-likelihood fit in
/// IndividualSpecific mode, the population-typical baseline when no
/// observations exist yet).
pub fn predict_trajectory(
    model: &TrainedModel,
    obs: &[Observation],
    targets: &[f64],
) -> Result<TrajectoryPrediction> {
    let (kernel, noise, _) = resolve_individual_params(model, obs)?;
    predict_trajectory_with_params(model, obs, targets, &kernel, &noise)
}
