//! EM training of the multi-task GP with a shared latent mean process.
//!
//! Every individual's trajectory is modelled as the sum of one latent mean
//! process, common to the whole cohort, and an individual-specific GP plus
//! observation noise. The E-step computes the Gaussian posterior over the
//! mean process on a working grid in closed form; the M-step maximizes the
//! expected complete-data log-likelihood over the hyperparameters by
//! quasi-Newton ascent in log space. Hyperparameters are either shared by
//! all individuals (`Common`) or learned per individual
//! (`IndividualSpecific`).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed_for, Cohort, Individual, AGE_MATCH_TOL};
use crate::error::{Error, Result};
use crate::gp::{
    kernel_matrix, mvn_logpdf, safe_cholesky, symmetrize, GaussianDist, KernelParams, NoiseParams,
};
use crate::optim;

/// Smallest admissible variance (kernel or noise); keeps per-individual
/// covariances invertible for singleton individuals.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Format-version string written into every serialized model.
pub const MODEL_FORMAT_VERSION: &str = "1";

const LN_2PI: f64 = 1.8378770664093453;

/// Hyperparameter sharing regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HpMode {
    #[serde(rename = "common")]
    Common,
    #[serde(rename = "individual")]
    IndividualSpecific,
}

impl std::fmt::Display for HpMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HpMode::Common => f.write_str("common"),
            HpMode::IndividualSpecific => f.write_str("individual"),
        }
    }
}

/// Gaussian belief over the latent mean process on a working grid of ages.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperPosterior {
    grid: Vec<f64>,
    belief: GaussianDist,
}

impl HyperPosterior {
    pub fn new(grid: Vec<f64>, belief: GaussianDist) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::EmptyInput("hyper-posterior grid".into()));
        }
        for w in grid.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidParameter(format!(
                    "grid not strictly increasing near {}",
                    w[0]
                )));
            }
        }
        if belief.dim() != grid.len() {
            return Err(Error::DimensionMismatch {
                context: "hyper-posterior belief",
                expected: grid.len(),
                actual: belief.dim(),
            });
        }
        Ok(Self { grid, belief })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn mean(&self) -> &DVector<f64> {
        self.belief.mean()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        self.belief.covariance()
    }

    pub fn belief(&self) -> &GaussianDist {
        &self.belief
    }

    /// Index of `age` in the grid, within [`AGE_MATCH_TOL`].
    pub fn index_of(&self, age: f64) -> Option<usize> {
        grid_index(&self.grid, age)
    }
}

pub(crate) fn grid_index(grid: &[f64], age: f64) -> Option<usize> {
    let pos = grid.partition_point(|&g| g < age - AGE_MATCH_TOL);
    if pos < grid.len() && (grid[pos] - age).abs() <= AGE_MATCH_TOL {
        Some(pos)
    } else {
        None
    }
}

fn grid_indices(grid: &[f64], individual: &Individual) -> Result<Vec<usize>> {
    individual
        .observations()
        .iter()
        .map(|o| grid_index(grid, o.age()).ok_or(Error::GridMembership { age: o.age() }))
        .collect()
}

/// Per-individual hyperparameters: one shared set, or one set per id.
#[derive(Debug, Clone, PartialEq)]
pub enum IndividualParams {
    Shared(KernelParams, NoiseParams),
    PerIndividual(BTreeMap<String, (KernelParams, NoiseParams)>),
}

impl IndividualParams {
    pub fn get(&self, id: &str) -> Result<(&KernelParams, &NoiseParams)> {
        match self {
            IndividualParams::Shared(k, n) => Ok((k, n)),
            IndividualParams::PerIndividual(map) => map
                .get(id)
                .map(|(k, n)| (k, n))
                .ok_or_else(|| Error::MissingIndividualParams { id: id.to_string() }),
        }
    }
}

/// The full hyperparameter state the EM iterates over.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub mean_kernel: KernelParams,
    pub prior_mean_constant: f64,
    pub individual: IndividualParams,
}

impl ModelParams {
    fn validate_for(&self, mode: HpMode, individuals: &[Individual]) -> Result<()> {
        match (mode, &self.individual) {
            (HpMode::Common, IndividualParams::Shared(..)) => Ok(()),
            (HpMode::IndividualSpecific, IndividualParams::PerIndividual(map)) => {
                for ind in individuals {
                    if !map.contains_key(ind.id()) {
                        return Err(Error::MissingIndividualParams {
                            id: ind.id().to_string(),
                        });
                    }
                }
                if map.len() != individuals.len() {
                    return Err(Error::InvalidParameter(format!(
                        "per-individual parameter map has {} entries for {} individuals",
                        map.len(),
                        individuals.len()
                    )));
                }
                Ok(())
            }
            (mode, _) => Err(Error::InvalidParameter(format!(
                "individual parameter layout does not match hp mode {mode}"
            ))),
        }
    }
}

/// Ages the hyper-posterior is represented on: the union of all observed
/// ages plus `extra_resolution` equally spaced refinement points spanning
/// the observed range, deduplicated within [`AGE_MATCH_TOL`].
pub fn working_grid(cohort: &Cohort, extra_resolution: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = cohort
        .individuals()
        .iter()
        .flat_map(|i| i.observations().iter().map(|o| o.age()))
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup_by(|b, a| (*b - *a).abs() <= AGE_MATCH_TOL);

    if extra_resolution > 0 {
        let lo = grid[0];
        let hi = grid[grid.len() - 1];
        let mut extra = Vec::with_capacity(extra_resolution);
        for k in 0..extra_resolution {
            let p = if extra_resolution == 1 {
                lo
            } else {
                lo + (hi - lo) * k as f64 / (extra_resolution - 1) as f64
            };
            // Observed ages take precedence; refinement only fills gaps.
            if grid_index(&grid, p).is_none() {
                extra.push(p);
            }
        }
        grid.extend(extra);
        grid.sort_by(f64::total_cmp);
        grid.dedup_by(|b, a| (*b - *a).abs() <= AGE_MATCH_TOL);
    }
    grid
}

/// Closed-form E-step: the Gaussian posterior over the latent mean process
/// on `grid`, given per-individual hyperparameters.
///
/// With `K₀ = k(grid, grid)`, `Ψᵢ = kᵢ(tᵢ, tᵢ) + σᵢ²I` and `Pᵢ` the selection
/// of grid rows at individual `i`'s ages:
/// `K̂ = (K₀⁻¹ + Σᵢ PᵢᵀΨᵢ⁻¹Pᵢ)⁻¹`, `m̂ = K̂·(K₀⁻¹m₀ + Σᵢ PᵢᵀΨᵢ⁻¹yᵢ)`.
///
/// An empty individual list yields the prior `(m₀, K₀)` exactly.
pub fn e_step(
    individuals: &[Individual],
    mean_kernel: &KernelParams,
    prior_mean_constant: f64,
    individual_params: &IndividualParams,
    grid: &[f64],
) -> Result<HyperPosterior> {
    let g = grid.len();
    let k0 = kernel_matrix(mean_kernel, grid, grid)?;
    let m0 = DVector::from_element(g, prior_mean_constant);
    if individuals.is_empty() {
        return HyperPosterior::new(grid.to_vec(), GaussianDist::new(m0, k0)?);
    }

    let chol0 = safe_cholesky(&k0)?;
    let mut precision = chol0.inverse();
    let mut rhs = chol0.solve_vec(&m0);

    for ind in individuals {
        let idx = grid_indices(grid, ind)?;
        let ages = ind.ages();
        let y = DVector::from_vec(ind.values());
        let (kp, np) = individual_params.get(ind.id())?;
        let mut psi = kernel_matrix(kp, &ages, &ages)?;
        for d in 0..psi.nrows() {
            psi[(d, d)] += np.noise_variance();
        }
        let chol_psi = safe_cholesky(&psi)?;
        let w = chol_psi.inverse();
        let wy = chol_psi.solve_vec(&y);
        for (a, &ia) in idx.iter().enumerate() {
            rhs[ia] += wy[a];
            for (b, &ib) in idx.iter().enumerate() {
                precision[(ia, ib)] += w[(a, b)];
            }
        }
    }

    symmetrize(&mut precision);
    let chol = safe_cholesky(&precision)?;
    let k_hat = chol.inverse();
    let m_hat = chol.solve_vec(&rhs);
    HyperPosterior::new(grid.to_vec(), GaussianDist::new(m_hat, k_hat)?)
}

/// Squared distances between locations, cached for kernel and gradient
/// evaluation.
fn squared_distances(xs: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(xs.len(), xs.len(), |i, j| {
        let d = xs[i] - xs[j];
        d * d
    })
}

fn eq_kernel_from_sq(sq: &DMatrix<f64>, variance: f64, lengthscale: f64) -> DMatrix<f64> {
    let inv_two_l2 = 1.0 / (2.0 * lengthscale * lengthscale);
    sq.map(|d2| variance * (-d2 * inv_two_l2).exp())
}

/// Overflowed log-parameters make a region infeasible rather than a crash;
/// the line search backs off from an `Err`.
fn finite_params(z: &[f64]) -> Result<()> {
    for &zi in z {
        if !zi.is_finite() || !zi.exp().is_finite() {
            return Err(Error::NonFiniteInput(format!("log-parameter {zi}")));
        }
    }
    Ok(())
}

/// M-step objective (a): expected log-density of the latent mean process
/// under the current hyper-posterior, as a function of the mean-process
/// hyperparameters.
///
/// Coordinates: `z = [ln variance, ln lengthscale, prior mean constant]`.
/// Value: `log N(m̂; m₀·1, K₀) − ½·tr(K₀⁻¹·K̂)`.
pub struct MeanProcessObjective<'a> {
    post_mean: &'a DVector<f64>,
    /// Lower Cholesky factor of the hyper-posterior covariance; lets the
    /// trace term be evaluated with one triangular solve.
    post_cov_chol: DMatrix<f64>,
    sq: DMatrix<f64>,
}

impl<'a> MeanProcessObjective<'a> {
    pub fn new(hp: &'a HyperPosterior) -> Result<Self> {
        Ok(Self {
            post_mean: hp.mean(),
            post_cov_chol: safe_cholesky(hp.covariance())?.lower(),
            sq: squared_distances(hp.grid()),
        })
    }

    pub fn pack(kernel: &KernelParams, prior_mean_constant: f64) -> [f64; 3] {
        [
            kernel.variance().ln(),
            kernel.lengthscale().ln(),
            prior_mean_constant,
        ]
    }

    pub fn unpack(z: &[f64]) -> Result<(KernelParams, f64)> {
        Ok((KernelParams::new(z[0].exp(), z[1].exp())?, z[2]))
    }

    pub fn value(&self, z: &[f64]) -> Result<f64> {
        self.eval(z, false).map(|(v, _)| v)
    }

    pub fn value_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.eval(z, true).map(|(v, g)| (v, g.unwrap()))
    }

    fn eval(&self, z: &[f64], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        finite_params(&z[..2])?;
        if !z[2].is_finite() {
            return Err(Error::NonFiniteInput(format!("prior mean constant {}", z[2])));
        }
        let (variance, lengthscale, m0) = (z[0].exp(), z[1].exp(), z[2]);
        let n = self.post_mean.len();
        let k0 = eq_kernel_from_sq(&self.sq, variance, lengthscale);
        let chol = safe_cholesky(&k0)?;
        let r = self.post_mean - DVector::from_element(n, m0);
        let alpha = chol.solve_vec(&r);
        let quad = r.dot(&alpha);
        // tr(K₀⁻¹K̂) = ‖L⁻¹·C‖²_F with K₀ = LLᵀ and K̂ = CCᵀ.
        let half = chol
            .lower()
            .solve_lower_triangular(&self.post_cov_chol)
            .expect("factor is invertible");
        let trace = half.iter().map(|x| x * x).sum::<f64>();
        let value = -0.5 * (quad + chol.log_det() + n as f64 * LN_2PI) - 0.5 * trace;
        if !want_grad {
            return Ok((value, None));
        }

        let w = chol.inverse();
        // B = K₀⁻¹K̂K₀⁻¹ = (W·C)(W·C)ᵀ.
        let wc = &w * &self.post_cov_chol;
        let b = &wc * wc.transpose();
        // A = ααᵀ − K₀⁻¹ + K₀⁻¹K̂K₀⁻¹; gradient wrt a kernel parameter θ is
        // ½·tr(A·∂K₀/∂θ).
        let a = &alpha * alpha.transpose() - &w + b;
        let inv_l2 = 1.0 / (lengthscale * lengthscale);
        let mut g_logv = 0.0;
        let mut g_logl = 0.0;
        for i in 0..n {
            for j in 0..n {
                let aij_kij = a[(i, j)] * k0[(i, j)];
                g_logv += aij_kij;
                g_logl += aij_kij * self.sq[(i, j)] * inv_l2;
            }
        }
        let g_m0 = alpha.sum();
        Ok((value, Some(vec![0.5 * g_logv, 0.5 * g_logl, g_m0])))
    }
}

struct IndividualBlock {
    y: DVector<f64>,
    post_mean: DVector<f64>,
    post_cov: DMatrix<f64>,
    sq: DMatrix<f64>,
}

impl IndividualBlock {
    fn new(hp: &HyperPosterior, individual: &Individual) -> Result<Self> {
        let idx = grid_indices(hp.grid(), individual)?;
        let n = idx.len();
        let mean = hp.mean();
        let cov = hp.covariance();
        Ok(Self {
            y: DVector::from_vec(individual.values()),
            post_mean: DVector::from_fn(n, |i, _| mean[idx[i]]),
            post_cov: DMatrix::from_fn(n, n, |i, j| cov[(idx[i], idx[j])]),
            sq: squared_distances(&individual.ages()),
        })
    }
}

/// M-step objective (b): expected log-density of the observations given the
/// latent mean process, summed over one or more individuals sharing the
/// hyperparameters being optimized.
///
/// Coordinates: `z = [ln variance, ln lengthscale, ln noise variance]`.
/// Value: `Σᵢ log N(yᵢ; m̂(tᵢ), Ψᵢ) − ½·tr(Ψᵢ⁻¹·K̂(tᵢ,tᵢ))`.
pub struct IndividualObjective {
    blocks: Vec<IndividualBlock>,
}

impl IndividualObjective {
    pub fn for_individual(hp: &HyperPosterior, individual: &Individual) -> Result<Self> {
        Ok(Self {
            blocks: vec![IndividualBlock::new(hp, individual)?],
        })
    }

    pub fn for_cohort(hp: &HyperPosterior, individuals: &[Individual]) -> Result<Self> {
        Ok(Self {
            blocks: individuals
                .iter()
                .map(|ind| IndividualBlock::new(hp, ind))
                .collect::<Result<_>>()?,
        })
    }

    pub fn pack(kernel: &KernelParams, noise: &NoiseParams) -> [f64; 3] {
        [
            kernel.variance().ln(),
            kernel.lengthscale().ln(),
            noise.noise_variance().ln(),
        ]
    }

    pub fn unpack(z: &[f64]) -> Result<(KernelParams, NoiseParams)> {
        Ok((
            KernelParams::new(z[0].exp(), z[1].exp())?,
            NoiseParams::new(z[2].exp())?,
        ))
    }

    pub fn value(&self, z: &[f64]) -> Result<f64> {
        self.eval(z, false).map(|(v, _)| v)
    }

    pub fn value_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.eval(z, true).map(|(v, g)| (v, g.unwrap()))
    }

    fn eval(&self, z: &[f64], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        finite_params(z)?;
        let (variance, lengthscale, noise_var) = (z[0].exp(), z[1].exp(), z[2].exp());
        let inv_l2 = 1.0 / (lengthscale * lengthscale);
        let mut value = 0.0;
        let mut grad = [0.0f64; 3];
        for block in &self.blocks {
            let n = block.y.len();
            let k_part = eq_kernel_from_sq(&block.sq, variance, lengthscale);
            let mut psi = k_part.clone();
            for d in 0..n {
                psi[(d, d)] += noise_var;
            }
            let chol = safe_cholesky(&psi)?;
            let r = &block.y - &block.post_mean;
            let alpha = chol.solve_vec(&r);
            let quad = r.dot(&alpha);
            let trace = chol.solve_mat(&block.post_cov).trace();
            value += -0.5 * (quad + chol.log_det() + n as f64 * LN_2PI) - 0.5 * trace;
            if !want_grad {
                continue;
            }
            let w = chol.inverse();
            let b = &w * &block.post_cov * &w;
            let a = &alpha * alpha.transpose() - &w + b;
            for i in 0..n {
                for j in 0..n {
                    let aij_kij = a[(i, j)] * k_part[(i, j)];
                    grad[0] += 0.5 * aij_kij;
                    grad[1] += 0.5 * aij_kij * block.sq[(i, j)] * inv_l2;
                }
                grad[2] += 0.5 * noise_var * a[(i, i)];
            }
        }
        Ok((value, want_grad.then(|| grad.to_vec())))
    }
}

fn lower_bounds_kernel() -> [f64; 3] {
    [VARIANCE_FLOOR.ln(), f64::NEG_INFINITY, VARIANCE_FLOOR.ln()]
}

/// One M-step: hyperparameters maximizing the expected complete-data
/// log-likelihood under `hp`, warm-started from `current`.
pub fn m_step(
    individuals: &[Individual],
    hp: &HyperPosterior,
    mode: HpMode,
    current: &ModelParams,
) -> Result<ModelParams> {
    current.validate_for(mode, individuals)?;

    let mean_obj = MeanProcessObjective::new(hp)?;
    let z0 = MeanProcessObjective::pack(&current.mean_kernel, current.prior_mean_constant);
    let lower = [VARIANCE_FLOOR.ln(), f64::NEG_INFINITY, f64::NEG_INFINITY];
    let res = optim::maximize_with_restarts(
        |z| mean_obj.value(z),
        |z| mean_obj.value_grad(z),
        &z0,
        &lower,
    )?;
    let (mean_kernel, prior_mean_constant) = MeanProcessObjective::unpack(&res.x)?;

    let individual = match (&current.individual, mode) {
        (IndividualParams::Shared(kernel, noise), HpMode::Common) => {
            let obj = IndividualObjective::for_cohort(hp, individuals)?;
            let z0 = IndividualObjective::pack(kernel, noise);
            let res = optim::maximize_with_restarts(
                |z| obj.value(z),
                |z| obj.value_grad(z),
                &z0,
                &lower_bounds_kernel(),
            )?;
            let (k, n) = IndividualObjective::unpack(&res.x)?;
            IndividualParams::Shared(k, n)
        }
        (IndividualParams::PerIndividual(map), HpMode::IndividualSpecific) => {
            let mut out = BTreeMap::new();
            for ind in individuals {
                let (kernel, noise) = &map[ind.id()];
                let obj = IndividualObjective::for_individual(hp, ind)?;
                let z0 = IndividualObjective::pack(kernel, noise);
                let res = optim::maximize_with_restarts(
                    |z| obj.value(z),
                    |z| obj.value_grad(z),
                    &z0,
                    &lower_bounds_kernel(),
                )?;
                let (k, n) = IndividualObjective::unpack(&res.x)?;
                out.insert(ind.id().to_string(), (k, n));
            }
            IndividualParams::PerIndividual(out)
        }
        _ => unreachable!("validated above"),
    };

    Ok(ModelParams {
        mean_kernel,
        prior_mean_constant,
        individual,
    })
}

/// Exact observed-data log-likelihood: the joint Gaussian density of every
/// observation with the latent mean process integrated out. Individuals are
/// coupled through the mean-process covariance across their ages.
pub fn observed_log_likelihood(individuals: &[Individual], params: &ModelParams) -> Result<f64> {
    let mut ages = Vec::new();
    let mut values = Vec::new();
    let mut offsets = Vec::with_capacity(individuals.len());
    for ind in individuals {
        offsets.push(ages.len());
        ages.extend(ind.ages());
        values.extend(ind.values());
    }
    if ages.is_empty() {
        return Err(Error::EmptyInput("observed_log_likelihood".into()));
    }
    let mut sigma = kernel_matrix(&params.mean_kernel, &ages, &ages)?;
    for (block, ind) in individuals.iter().enumerate() {
        let t = ind.ages();
        let (kp, np) = params.individual.get(ind.id())?;
        let k_ind = kernel_matrix(kp, &t, &t)?;
        let o = offsets[block];
        for a in 0..t.len() {
            for b in 0..t.len() {
                sigma[(o + a, o + b)] += k_ind[(a, b)];
            }
            sigma[(o + a, o + a)] += np.noise_variance();
        }
    }
    let n = ages.len();
    let mean = DVector::from_element(n, params.prior_mean_constant);
    mvn_logpdf(
        &DVector::from_vec(values),
        &GaussianDist::new(mean, sigma)?,
    )
}

/// Sum of per-individual marginal log-densities, ignoring the coupling of
/// individuals through the shared mean process. Cheaper than
/// [`observed_log_likelihood`] and a useful diagnostic, but not the quantity
/// EM is guaranteed to increase.
pub fn independent_marginal_log_likelihood(
    individuals: &[Individual],
    params: &ModelParams,
) -> Result<f64> {
    let mut total = 0.0;
    for ind in individuals {
        let t = ind.ages();
        let (kp, np) = params.individual.get(ind.id())?;
        let mut sigma = kernel_matrix(&params.mean_kernel, &t, &t)?;
        let k_ind = kernel_matrix(kp, &t, &t)?;
        sigma += &k_ind;
        for d in 0..t.len() {
            sigma[(d, d)] += np.noise_variance();
        }
        let mean = DVector::from_element(t.len(), params.prior_mean_constant);
        total += mvn_logpdf(
            &DVector::from_vec(ind.values()),
            &GaussianDist::new(mean, sigma)?,
        )?;
    }
    Ok(total)
}

/// EM iteration control.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_iter: usize,
    pub rel_tol: f64,
    /// Refinement points added to the working grid beyond the observed ages.
    pub grid_extra_resolution: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            rel_tol: 1e-4,
            grid_extra_resolution: 0,
        }
    }
}

/// A fitted model: hyperparameters, hyper-posterior, and training
/// provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub hp_mode: HpMode,
    pub params: ModelParams,
    pub hyper_posterior: HyperPosterior,
    pub log_likelihood: f64,
    /// Observed-data log-likelihood per EM iteration, starting at the
    /// initial parameters.
    pub ll_trace: Vec<f64>,
    pub em_iterations: usize,
    pub restart_index: usize,
    pub seed: u64,
}

/// Alternates E- and M-steps from `init` until the relative change of the
/// observed-data log-likelihood drops below `rel_tol` or `max_iter` is hit.
pub fn em_train(
    cohort: &Cohort,
    mode: HpMode,
    init: &ModelParams,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    let individuals = cohort.individuals();
    init.validate_for(mode, individuals)?;
    let grid = working_grid(cohort, config.grid_extra_resolution);

    let mut params = init.clone();
    let mut ll = observed_log_likelihood(individuals, &params)?;
    let mut trace = vec![ll];
    let mut iterations = 0;

    for _ in 0..config.max_iter {
        let hp = e_step(
            individuals,
            &params.mean_kernel,
            params.prior_mean_constant,
            &params.individual,
            &grid,
        )?;
        params = m_step(individuals, &hp, mode, &params)?;
        let new_ll = observed_log_likelihood(individuals, &params)?;
        iterations += 1;
        trace.push(new_ll);
        let rel = (new_ll - ll).abs() / new_ll.abs().max(1e-12);
        ll = new_ll;
        if rel < config.rel_tol {
            break;
        }
    }

    let hyper_posterior = e_step(
        individuals,
        &params.mean_kernel,
        params.prior_mean_constant,
        &params.individual,
        &grid,
    )?;
    Ok(TrainedModel {
        hp_mode: mode,
        params,
        hyper_posterior,
        log_likelihood: ll,
        ll_trace: trace,
        em_iterations: iterations,
        restart_index: 0,
        seed: 0,
    })
}

/// Outcome of one restart inside [`train_with_restarts`].
#[derive(Debug, Clone, Serialize)]
pub struct RestartRecord {
    pub index: usize,
    pub log_likelihood: Option<f64>,
    pub em_iterations: Option<usize>,
    pub error: Option<String>,
}

/// The selected model plus every restart's outcome.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub restarts: Vec<RestartRecord>,
}

/// Bounds of the random initialization: log kernel variance and lengthscale
/// uniform in `[ln 1e-2, ln 1e2]`, log noise variance in `[ln 1e-2, ln 1e1]`.
const INIT_LOG_KERNEL: (f64, f64) = (-2.0 * std::f64::consts::LN_10, 2.0 * std::f64::consts::LN_10);
const INIT_LOG_NOISE: (f64, f64) = (-2.0 * std::f64::consts::LN_10, std::f64::consts::LN_10);

fn random_init(cohort: &Cohort, mode: HpMode, seed: u64, restart: usize) -> Result<ModelParams> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed_for(
        seed,
        "restart-init",
        &restart.to_string(),
    ));
    let draw_kernel = |rng: &mut ChaCha12Rng| -> Result<KernelParams> {
        let v = rng.gen_range(INIT_LOG_KERNEL.0..INIT_LOG_KERNEL.1).exp();
        let l = rng.gen_range(INIT_LOG_KERNEL.0..INIT_LOG_KERNEL.1).exp();
        KernelParams::new(v, l)
    };
    let mean_kernel = draw_kernel(&mut rng)?;
    let individual = match mode {
        HpMode::Common => {
            let k = draw_kernel(&mut rng)?;
            let s = rng.gen_range(INIT_LOG_NOISE.0..INIT_LOG_NOISE.1).exp();
            IndividualParams::Shared(k, NoiseParams::new(s)?)
        }
        HpMode::IndividualSpecific => {
            let mut map = BTreeMap::new();
            for ind in cohort.individuals() {
                let k = draw_kernel(&mut rng)?;
                let s = rng.gen_range(INIT_LOG_NOISE.0..INIT_LOG_NOISE.1).exp();
                map.insert(ind.id().to_string(), (k, NoiseParams::new(s)?));
            }
            IndividualParams::PerIndividual(map)
        }
    };
    Ok(ModelParams {
        mean_kernel,
        prior_mean_constant: cohort.global_value_mean(),
        individual,
    })
}

/// Runs [`em_train`] from `n_restarts` seeded random initializations and
/// keeps the model with the highest final log-likelihood (ties broken by the
/// lowest restart index).
pub fn train_with_restarts(
    cohort: &Cohort,
    mode: HpMode,
    n_restarts: usize,
    seed: u64,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if n_restarts == 0 {
        return Err(Error::InvalidParameter("n_restarts must be >= 1".into()));
    }
    let mut records = Vec::with_capacity(n_restarts);
    let mut best: Option<TrainedModel> = None;
    for restart in 0..n_restarts {
        let attempt = random_init(cohort, mode, seed, restart)
            .and_then(|init| em_train(cohort, mode, &init, config));
        match attempt {
            Ok(mut model) => {
                model.restart_index = restart;
                model.seed = seed;
                records.push(RestartRecord {
                    index: restart,
                    log_likelihood: Some(model.log_likelihood),
                    em_iterations: Some(model.em_iterations),
                    error: None,
                });
                let better = match &best {
                    Some(b) => model.log_likelihood > b.log_likelihood,
                    None => true,
                };
                if better {
                    best = Some(model);
                }
            }
            Err(e) => records.push(RestartRecord {
                index: restart,
                log_likelihood: None,
                em_iterations: None,
                error: Some(e.to_string()),
            }),
        }
    }
    match best {
        Some(model) => Ok(TrainOutcome {
            model,
            restarts: records,
        }),
        None => {
            let details = records
                .iter()
                .map(|r| {
                    format!(
                        "restart {}: {}",
                        r.index,
                        r.error.as_deref().unwrap_or("unknown")
                    )
                })
                .collect::<Vec<_>>()
                .join("; ");
            Err(Error::AllRestartsFailed {
                n: n_restarts,
                details,
            })
        }
    }
}

// --- serialization ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct IndividualParamsJson {
    kernel: KernelParams,
    noise: NoiseParams,
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    format_version: String,
    hp_mode: HpMode,
    prior_mean_constant: f64,
    mean_kernel: KernelParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shared_individual: Option<IndividualParamsJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    per_individual: Option<BTreeMap<String, IndividualParamsJson>>,
    grid: Vec<f64>,
    hyper_posterior_mean: Vec<f64>,
    /// Row-major lower triangle (including the diagonal) of the
    /// hyper-posterior covariance.
    hyper_posterior_cov_lower: Vec<f64>,
    log_likelihood: f64,
    em_iterations: usize,
    restart_index: usize,
    seed: u64,
    ll_trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run_config: Option<serde_json::Value>,
}

impl TrainedModel {
    /// Serializes to the model JSON document; `run_config` is echoed
    /// verbatim when supplied (the CLI embeds its effective configuration).
    pub fn to_json(&self, run_config: Option<serde_json::Value>) -> Result<String> {
        let g = self.hyper_posterior.grid().len();
        let cov = self.hyper_posterior.covariance();
        let mut lower = Vec::with_capacity(g * (g + 1) / 2);
        for i in 0..g {
            for j in 0..=i {
                lower.push(cov[(i, j)]);
            }
        }
        let (shared, per) = match &self.params.individual {
            IndividualParams::Shared(k, n) => (
                Some(IndividualParamsJson {
                    kernel: *k,
                    noise: *n,
                }),
                None,
            ),
            IndividualParams::PerIndividual(map) => (
                None,
                Some(
                    map.iter()
                        .map(|(id, (k, n))| {
                            (
                                id.clone(),
                                IndividualParamsJson {
                                    kernel: *k,
                                    noise: *n,
                                },
                            )
                        })
                        .collect(),
                ),
            ),
        };
        let doc = ModelJson {
            format_version: MODEL_FORMAT_VERSION.to_string(),
            hp_mode: self.hp_mode,
            prior_mean_constant: self.params.prior_mean_constant,
            mean_kernel: self.params.mean_kernel,
            shared_individual: shared,
            per_individual: per,
            grid: self.hyper_posterior.grid().to_vec(),
            hyper_posterior_mean: self.hyper_posterior.mean().iter().copied().collect(),
            hyper_posterior_cov_lower: lower,
            log_likelihood: self.log_likelihood,
            em_iterations: self.em_iterations,
            restart_index: self.restart_index,
            seed: self.seed,
            ll_trace: self.ll_trace.clone(),
            run_config,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parses and validates the model JSON document.
    pub fn from_json(text: &str) -> Result<(TrainedModel, Option<serde_json::Value>)> {
        let doc: ModelJson = serde_json::from_str(text)?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported format version {}",
                doc.format_version
            )));
        }
        let g = doc.grid.len();
        if doc.hyper_posterior_mean.len() != g {
            return Err(Error::ModelFormat(format!(
                "hyper-posterior mean has {} entries for a grid of {g}",
                doc.hyper_posterior_mean.len()
            )));
        }
        if doc.hyper_posterior_cov_lower.len() != g * (g + 1) / 2 {
            return Err(Error::ModelFormat(format!(
                "covariance lower triangle has {} entries, expected {}",
                doc.hyper_posterior_cov_lower.len(),
                g * (g + 1) / 2
            )));
        }
        let mut cov = DMatrix::zeros(g, g);
        let mut it = doc.hyper_posterior_cov_lower.iter();
        for i in 0..g {
            for j in 0..=i {
                let v = *it.next().unwrap();
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let individual = match (doc.hp_mode, doc.shared_individual, doc.per_individual) {
            (HpMode::Common, Some(s), None) => IndividualParams::Shared(s.kernel, s.noise),
            (HpMode::IndividualSpecific, None, Some(map)) => IndividualParams::PerIndividual(
                map.into_iter()
                    .map(|(id, p)| (id, (p.kernel, p.noise)))
                    .collect(),
            ),
            _ => {
                return Err(Error::ModelFormat(
                    "individual parameter section does not match hp_mode".into(),
                ))
            }
        };
        if !doc.log_likelihood.is_finite() {
            return Err(Error::ModelFormat("log_likelihood is not finite".into()));
        }
        let hyper_posterior = HyperPosterior::new(
            doc.grid,
            GaussianDist::new(DVector::from_vec(doc.hyper_posterior_mean), cov)?,
        )?;
        Ok((
            TrainedModel {
                hp_mode: doc.hp_mode,
                params: ModelParams {
                    mean_kernel: doc.mean_kernel,
                    prior_mean_constant: doc.prior_mean_constant,
                    individual,
                },
                hyper_posterior,
                log_likelihood: doc.log_likelihood,
                ll_trace: doc.ll_trace,
                em_iterations: doc.em_iterations,
                restart_index: doc.restart_index,
                seed: doc.seed,
            },
            doc.run_config,
        ))
    }
}
