//! Longitudinal cohort ingestion, validation, splitting, and synthesis.
//!
//! A cohort is a set of identified individuals, each with a sparse,
//! irregularly sampled series of (age, value) observations. This module
//! owns the CSV formats, the train/test and prediction/evaluation splits,
//! the synthetic-cohort generator used for benchmarks, and the normative
//! reference band.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::gp::{kernel_matrix, safe_cholesky, KernelParams, NoiseParams};

/// Ages closer than this are considered the same grid point.
pub const AGE_MATCH_TOL: f64 = 1e-9;

const MAX_AGE_YEARS: f64 = 130.0;

/// Stable seed derivation so every random stream hangs off one user seed.
/// FNV-1a over the seed bytes followed by the component name (and id).
pub fn derive_seed(seed: u64, component: &str) -> u64 {
    fnv1a(seed, component.as_bytes(), &[])
}

pub fn derive_seed_for(seed: u64, component: &str, id: &str) -> u64 {
    fnv1a(seed, component.as_bytes(), id.as_bytes())
}

fn fnv1a(seed: u64, a: &[u8], b: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for byte in seed
        .to_le_bytes()
        .iter()
        .chain(a.iter())
        .chain([0u8].iter())
        .chain(b.iter())
    {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// One blood-test style measurement: age at test (years) and measured value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    age: f64,
    value: f64,
}

impl Observation {
    pub fn new(age: f64, value: f64) -> Result<Self> {
        if !age.is_finite() || !value.is_finite() {
            return Err(Error::NonFiniteInput(format!(
                "observation ({age}, {value})"
            )));
        }
        if age <= 0.0 || age >= MAX_AGE_YEARS {
            return Err(Error::InvalidParameter(format!(
                "age {age} outside (0, {MAX_AGE_YEARS})"
            )));
        }
        Ok(Self { age, value })
    }

    pub fn age(&self) -> f64 {
        self.age
    }

    pub fn value(&self) -> f64 {
        self.value
    }
}

/// An identified subject with at least one observation, ages strictly
/// increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    id: String,
    observations: Vec<Observation>,
}

impl Individual {
    pub fn new(id: impl Into<String>, mut observations: Vec<Observation>) -> Result<Self> {
        let id = id.into();
        if observations.is_empty() {
            return Err(Error::EmptyInput(format!(
                "individual {id} has no observations"
            )));
        }
        observations.sort_by(|a, b| a.age.total_cmp(&b.age));
        for w in observations.windows(2) {
            if w[1].age <= w[0].age {
                return Err(Error::InvalidParameter(format!(
                    "individual {id} has duplicate age {}",
                    w[0].age
                )));
            }
        }
        Ok(Self { id, observations })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn n_observations(&self) -> usize {
        self.observations.len()
    }

    pub fn ages(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.age).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.value).collect()
    }
}

/// A non-empty collection of individuals with unique ids, in a stable order.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    individuals: Vec<Individual>,
}

impl Cohort {
    pub fn new(individuals: Vec<Individual>) -> Result<Self> {
        if individuals.is_empty() {
            return Err(Error::EmptyInput("cohort has no individuals".into()));
        }
        let mut seen = HashMap::new();
        for ind in &individuals {
            if seen.insert(ind.id().to_string(), ()).is_some() {
                return Err(Error::InvalidParameter(format!(
                    "duplicate individual id {}",
                    ind.id()
                )));
            }
        }
        Ok(Self { individuals })
    }

    pub fn individuals(&self) -> &[Individual] {
        &self.individuals
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Individual> {
        self.individuals.iter().find(|i| i.id() == id)
    }

    pub fn n_observations(&self) -> usize {
        self.individuals.iter().map(|i| i.n_observations()).sum()
    }

    /// Mean of every observed value across the cohort.
    pub fn global_value_mean(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for ind in &self.individuals {
            for obs in ind.observations() {
                sum += obs.value();
                n += 1;
            }
        }
        sum / n as f64
    }
}

/// Published age-dependent reference range, linearly interpolated between
/// knots.
#[derive(Debug, Clone, PartialEq)]
pub struct NormativeBand {
    knots: Vec<(f64, f64, f64)>, // (age, lower, upper)
}

impl NormativeBand {
    pub fn new(knots: Vec<(f64, f64, f64)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::EmptyInput("normative band has no knots".into()));
        }
        for &(age, lower, upper) in &knots {
            if !(age.is_finite() && lower.is_finite() && upper.is_finite()) {
                return Err(Error::NonFiniteInput(format!(
                    "band knot ({age}, {lower}, {upper})"
                )));
            }
            if lower > upper {
                return Err(Error::InvalidParameter(format!(
                    "band knot at age {age} has lower {lower} > upper {upper}"
                )));
            }
        }
        for w in knots.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidParameter(format!(
                    "band knot ages must be strictly increasing near {}",
                    w[0].0
                )));
            }
        }
        Ok(Self { knots })
    }

    pub fn span(&self) -> (f64, f64) {
        (self.knots[0].0, self.knots[self.knots.len() - 1].0)
    }

    pub fn knots(&self) -> &[(f64, f64, f64)] {
        &self.knots
    }

    /// (lower, upper) at `age`, or an error outside the knot span.
    pub fn limits_at(&self, age: f64) -> Result<(f64, f64)> {
        let (lo, hi) = self.span();
        if age < lo || age > hi {
            return Err(Error::OutsideBandSpan { age, lo, hi });
        }
        let pos = self.knots.partition_point(|k| k.0 <= age);
        if pos == 0 {
            return Ok((self.knots[0].1, self.knots[0].2));
        }
        if pos == self.knots.len() {
            let last = self.knots[self.knots.len() - 1];
            return Ok((last.1, last.2));
        }
        let a = self.knots[pos - 1];
        let b = self.knots[pos];
        let t = (age - a.0) / (b.0 - a.0);
        Ok((a.1 + t * (b.1 - a.1), a.2 + t * (b.2 - a.2)))
    }
}

/// Train/test split request: fraction of individuals that trains, and the
/// seed driving the shuffle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    train_fraction: f64,
    seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Result<Self> {
        if !(train_fraction.is_finite() && train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "train_fraction {train_fraction} outside (0, 1)"
            )));
        }
        Ok(Self {
            train_fraction,
            seed,
        })
    }

    pub fn train_fraction(&self) -> f64 {
        self.train_fraction
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.75,
            seed: 0,
        }
    }
}

pub const COHORT_CSV_HEADER: &str = "patient_id,age_years,value";
pub const BAND_CSV_HEADER: &str = "age_years,lower,upper";

/// A non-fatal issue noticed while parsing a cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseWarning {
    pub message: String,
}

impl std::fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

fn parse_field(raw: &str, row: usize, what: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| Error::CsvParse {
        row,
        message: format!("{what} `{raw}` is not a number"),
    })
}

fn read_records<R: Read>(
    reader: R,
    header: &str,
) -> Result<Vec<(usize, Vec<String>)>> {
    let expected: Vec<&str> = header.split(',').collect();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    {
        let got = rdr.headers().map_err(|e| Error::CsvParse {
            row: 1,
            message: e.to_string(),
        })?;
        let got: Vec<&str> = got.iter().map(str::trim).collect();
        if got != expected {
            return Err(Error::CsvParse {
                row: 1,
                message: format!("expected header `{header}`, got `{}`", got.join(",")),
            });
        }
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::CsvParse {
            row: e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(0),
            message: e.to_string(),
        })?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        if rec.len() != expected.len() {
            return Err(Error::CsvParse {
                row,
                message: format!("expected {} fields, got {}", expected.len(), rec.len()),
            });
        }
        rows.push((row, rec.iter().map(|s| s.to_string()).collect()));
    }
    Ok(rows)
}

/// One raw data row: (csv line, age, value).
type RawRow = (usize, f64, f64);

struct GroupedRows {
    // Insertion-ordered (id, rows).
    groups: Vec<(String, Vec<RawRow>)>,
}

fn group_cohort_rows<R: Read>(reader: R) -> Result<GroupedRows> {
    let rows = read_records(reader, COHORT_CSV_HEADER)?;
    let mut groups: Vec<(String, Vec<RawRow>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (row, fields) in rows {
        let id = fields[0].trim().to_string();
        if id.is_empty() {
            return Err(Error::CsvParse {
                row,
                message: "empty patient_id".into(),
            });
        }
        let age = parse_field(&fields[1], row, "age_years")?;
        let value = parse_field(&fields[2], row, "value")?;
        if !age.is_finite() || age <= 0.0 || age >= MAX_AGE_YEARS {
            return Err(Error::CsvParse {
                row,
                message: format!("age_years {age} outside (0, {MAX_AGE_YEARS})"),
            });
        }
        if !value.is_finite() || value < 0.0 {
            return Err(Error::CsvParse {
                row,
                message: format!("value {value} is negative or non-finite"),
            });
        }
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            groups.push((id.clone(), Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push((row, age, value));
    }
    Ok(GroupedRows { groups })
}

fn build_individual(
    id: &str,
    mut rows: Vec<RawRow>,
    warnings: &mut Vec<ParseWarning>,
) -> Result<Individual> {
    rows.sort_by(|a, b| a.1.total_cmp(&b.1));
    // Re-assayed samples show up as duplicate (id, age) rows; average them
    // and keep an audit trail.
    let mut obs = Vec::with_capacity(rows.len());
    let mut i = 0;
    while i < rows.len() {
        let age = rows[i].1;
        let mut j = i + 1;
        while j < rows.len() && rows[j].1 == age {
            j += 1;
        }
        if j - i > 1 {
            warnings.push(ParseWarning {
                message: format!(
                    "individual {id}: {} duplicate observations at age {age} averaged",
                    j - i
                ),
            });
        }
        let mean = rows[i..j].iter().map(|r| r.2).sum::<f64>() / (j - i) as f64;
        obs.push(Observation::new(age, mean)?);
        i = j;
    }
    Individual::new(id, obs)
}

/// Parses the cohort CSV format (`patient_id,age_years,value`). Rows are
/// grouped by id and sorted by age; duplicate (id, age) rows are averaged
/// with a warning.
pub fn parse_cohort_csv<R: Read>(reader: R) -> Result<(Cohort, Vec<ParseWarning>)> {
    let grouped = group_cohort_rows(reader)?;
    if grouped.groups.is_empty() {
        return Err(Error::CsvParse {
            row: 1,
            message: "file contains no data rows".into(),
        });
    }
    let mut warnings = Vec::new();
    let mut individuals = Vec::with_capacity(grouped.groups.len());
    for (id, rows) in grouped.groups {
        individuals.push(build_individual(&id, rows, &mut warnings)?);
    }
    Ok((Cohort::new(individuals)?, warnings))
}

/// Parses observations for a single individual from the cohort CSV format.
/// A header-only file yields an empty observation list (used for
/// population-prior prediction); more than one id is an error.
pub fn parse_individual_csv<R: Read>(
    reader: R,
) -> Result<(Option<String>, Vec<Observation>, Vec<ParseWarning>)> {
    let grouped = group_cohort_rows(reader)?;
    let mut warnings = Vec::new();
    match grouped.groups.len() {
        0 => Ok((None, Vec::new(), warnings)),
        1 => {
            let (id, rows) = grouped.groups.into_iter().next().unwrap();
            let ind = build_individual(&id, rows, &mut warnings)?;
            Ok((Some(id), ind.observations().to_vec(), warnings))
        }
        n => Err(Error::InvalidParameter(format!(
            "expected observations for one individual, found {n} ids"
        ))),
    }
}

/// Writes a cohort back out in the canonical CSV format.
pub fn write_cohort_csv<W: Write>(cohort: &Cohort, mut writer: W) -> Result<()> {
    writeln!(writer, "{COHORT_CSV_HEADER}")?;
    for ind in cohort.individuals() {
        for obs in ind.observations() {
            writeln!(writer, "{},{},{}", ind.id(), obs.age(), obs.value())?;
        }
    }
    Ok(())
}

/// Parses the normative band CSV format (`age_years,lower,upper`).
pub fn parse_band_csv<R: Read>(reader: R) -> Result<NormativeBand> {
    let rows = read_records(reader, BAND_CSV_HEADER)?;
    let mut knots = Vec::with_capacity(rows.len());
    for (row, fields) in rows {
        let age = parse_field(&fields[0], row, "age_years")?;
        let lower = parse_field(&fields[1], row, "lower")?;
        let upper = parse_field(&fields[2], row, "upper")?;
        knots.push((age, lower, upper));
    }
    NormativeBand::new(knots)
}

/// Constraint-first quasi-random train/test split.
///
/// Individuals with a single observation are forced into training (a test
/// case needs at least one point to condition on and one to score); the
/// rest are shuffled by the seeded generator. The train side receives
/// `round(N · train_fraction)` individuals, ties rounding up.
pub fn quasi_random_split(cohort: &Cohort, spec: &SplitSpec) -> Result<(Cohort, Cohort)> {
    let n = cohort.len();
    let n_train = (n as f64 * spec.train_fraction()).round() as usize;
    let n_test = n - n_train;

    let singleton_count = cohort
        .individuals()
        .iter()
        .filter(|i| i.n_observations() == 1)
        .count();
    let multi_ids: Vec<&str> = cohort
        .individuals()
        .iter()
        .filter(|i| i.n_observations() >= 2)
        .map(|i| i.id())
        .collect();

    if n_test == 0 {
        return Err(Error::InvalidParameter(format!(
            "train_fraction {} leaves an empty test set for {n} individuals",
            spec.train_fraction()
        )));
    }
    if multi_ids.len() < n_test {
        return Err(Error::InfeasibleSplit {
            n_total: n,
            n_singleton: singleton_count,
            n_multi: multi_ids.len(),
            n_test,
        });
    }

    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(spec.seed(), "cohort-split"));
    let mut order: Vec<usize> = (0..multi_ids.len()).collect();
    order.shuffle(&mut rng);
    let test_ids: std::collections::HashSet<&str> =
        order[..n_test].iter().map(|&i| multi_ids[i]).collect();

    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n_test);
    for ind in cohort.individuals() {
        if test_ids.contains(ind.id()) {
            test.push(ind.clone());
        } else {
            train.push(ind.clone());
        }
    }
    Ok((Cohort::new(train)?, Cohort::new(test)?))
}

/// Uniformly random halves of one individual's observations:
/// `floor(n/2)` points to condition on, `ceil(n/2)` points to score.
pub fn prediction_evaluation_split(
    individual: &Individual,
    seed: u64,
) -> Result<(Vec<Observation>, Vec<Observation>)> {
    let n = individual.n_observations();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "individual {} has {n} observation(s); need at least 2 to split",
            individual.id()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_pred = n / 2;
    let mut pred_idx = order[..n_pred].to_vec();
    let mut eval_idx = order[n_pred..].to_vec();
    pred_idx.sort_unstable();
    eval_idx.sort_unstable();
    let obs = individual.observations();
    Ok((
        pred_idx.iter().map(|&i| obs[i]).collect(),
        eval_idx.iter().map(|&i| obs[i]).collect(),
    ))
}

/// Configuration for the synthetic-cohort generator.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_individuals: usize,
    /// Inclusive range for the number of observations per individual.
    pub observations_per_individual: (usize, usize),
    pub age_range: (f64, f64),
    pub mean_process: KernelParams,
    pub individual_process: KernelParams,
    pub noise: NoiseParams,
    pub prior_mean_constant: f64,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_individuals == 0 {
            return Err(Error::InvalidConfig("n_individuals must be >= 1".into()));
        }
        let (lo, hi) = self.observations_per_individual;
        if lo == 0 || hi < lo {
            return Err(Error::InvalidConfig(format!(
                "observations_per_individual range ({lo}, {hi}) is degenerate"
            )));
        }
        let (a, b) = self.age_range;
        if !(a.is_finite() && b.is_finite()) || a <= 0.0 || b >= MAX_AGE_YEARS || b <= a {
            return Err(Error::InvalidConfig(format!(
                "age_range ({a}, {b}) must be non-degenerate within (0, {MAX_AGE_YEARS})"
            )));
        }
        if !self.prior_mean_constant.is_finite() {
            return Err(Error::InvalidConfig("prior_mean_constant not finite".into()));
        }
        Ok(())
    }
}

/// The latent mean trajectory a synthetic cohort was drawn around, tabulated
/// at a dense grid plus every observation age.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    ages: Vec<f64>,
    mean: Vec<f64>,
}

impl GroundTruth {
    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.ages.iter().copied().zip(self.mean.iter().copied())
    }

    /// True latent mean at `age`, if tabulated (within [`AGE_MATCH_TOL`]).
    pub fn mean_at(&self, age: f64) -> Option<f64> {
        let pos = self.ages.partition_point(|&a| a < age - AGE_MATCH_TOL);
        if pos < self.ages.len() && (self.ages[pos] - age).abs() <= AGE_MATCH_TOL {
            Some(self.mean[pos])
        } else {
            None
        }
    }
}

const TRUTH_GRID_POINTS: usize = 101;

/// Draws a synthetic cohort from the generative model: one shared latent
/// mean trajectory, plus an independent per-individual deviation process,
/// plus observation noise. Deterministic given the seed; returns the latent
/// mean for recovery tests.
pub fn synthesize_cohort(config: &SynthConfig, seed: u64) -> Result<(Cohort, GroundTruth)> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "synthesize"));
    let (age_lo, age_hi) = config.age_range;
    let (obs_lo, obs_hi) = config.observations_per_individual;

    // 1. Observation ages, individual by individual.
    let mut per_individual_ages: Vec<Vec<f64>> = Vec::with_capacity(config.n_individuals);
    for _ in 0..config.n_individuals {
        let count = rng.gen_range(obs_lo..=obs_hi);
        let mut ages: Vec<f64> = Vec::with_capacity(count);
        while ages.len() < count {
            let age = rng.gen_range(age_lo..age_hi);
            if ages.iter().all(|&a| (a - age).abs() > 1e-6) {
                ages.push(age);
            }
        }
        ages.sort_by(f64::total_cmp);
        per_individual_ages.push(ages);
    }

    // 2. One joint draw of the latent mean over the dense truth grid plus
    //    every observation age.
    let mut all_points: Vec<f64> = Vec::new();
    for i in 0..TRUTH_GRID_POINTS {
        all_points.push(age_lo + (age_hi - age_lo) * i as f64 / (TRUTH_GRID_POINTS - 1) as f64);
    }
    for ages in &per_individual_ages {
        all_points.extend_from_slice(ages);
    }
    all_points.sort_by(f64::total_cmp);
    all_points.dedup_by(|b, a| (*b - *a).abs() <= AGE_MATCH_TOL);

    let mean_values = {
        let k = kernel_matrix(&config.mean_process, &all_points, &all_points)?;
        let chol = safe_cholesky(&k)?;
        let z = DVector::from_fn(all_points.len(), |_, _| standard_normal(&mut rng));
        let draw = chol.lower() * z;
        DVector::from_fn(all_points.len(), |i, _| {
            config.prior_mean_constant + draw[i]
        })
    };
    let truth = GroundTruth {
        ages: all_points.clone(),
        mean: mean_values.iter().copied().collect(),
    };

    // 3. Deviations and noise per individual.
    let mut individuals = Vec::with_capacity(config.n_individuals);
    for (i, ages) in per_individual_ages.iter().enumerate() {
        let k = kernel_matrix(&config.individual_process, ages, ages)?;
        let chol = safe_cholesky(&k)?;
        let z = DVector::from_fn(ages.len(), |_, _| standard_normal(&mut rng));
        let dev = chol.lower() * z;
        let sd = config.noise.noise_variance().sqrt();
        let mut obs = Vec::with_capacity(ages.len());
        for (j, &age) in ages.iter().enumerate() {
            let base = truth.mean_at(age).expect("observation age tabulated");
            let value = base + dev[j] + sd * standard_normal(&mut rng);
            obs.push(Observation::new(age, value)?);
        }
        individuals.push(Individual::new(format!("p{:03}", i + 1), obs)?);
    }
    Ok((Cohort::new(individuals)?, truth))
}

/// Box–Muller standard normal; value-stable across platforms because it only
/// uses `ln`, `sqrt`, `cos` on uniformly drawn f64s.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
