//! Batch pipeline commands behind the `magma` binary.
//!
//! Every command is a thin wrapper over the library: parse inputs, call one
//! operation, write outputs atomically. All randomness flows from the
//! single `seed` through named stream derivation, so reruns with identical
//! inputs produce byte-identical artifacts. Each command writes a JSON
//! sidecar (or embeds into its primary JSON artifact) echoing the effective
//! configuration and a format-version string.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::data::{
    parse_band_csv, parse_cohort_csv, parse_individual_csv, quasi_random_split, synthesize_cohort,
    write_cohort_csv, SplitSpec, SynthConfig,
};
use crate::error::{Error, Result};
use crate::evaluate::{band_coverage, evaluate_test_set, write_report_csv};
use crate::gp::{KernelParams, NoiseParams};
use crate::predict::{predict_trajectory_with_params, resolve_individual_params};
use crate::train::{train_with_restarts, HpMode, TrainConfig, TrainedModel, MODEL_FORMAT_VERSION};

/// Effective run configuration; flags override config-file values, which
/// override these defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub hp_mode: HpMode,
    pub n_restarts: usize,
    pub em_max_iter: usize,
    pub em_rel_tol: f64,
    pub grid_extra_resolution: usize,
    pub train_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            hp_mode: HpMode::Common,
            n_restarts: 25,
            em_max_iter: 100,
            em_rel_tol: 1e-4,
            grid_extra_resolution: 200,
            train_fraction: 0.75,
        }
    }
}

impl RunConfig {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_iter: self.em_max_iter,
            rel_tol: self.em_rel_tol,
            grid_extra_resolution: self.grid_extra_resolution,
        }
    }

    fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("RunConfig serializes")
    }
}

/// Synthetic-cohort section of the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub n_individuals: usize,
    pub obs_min: usize,
    pub obs_max: usize,
    pub age_min: f64,
    pub age_max: f64,
    pub mean_variance: f64,
    pub mean_lengthscale: f64,
    pub individual_variance: f64,
    pub individual_lengthscale: f64,
    pub noise_variance: f64,
    pub prior_mean_constant: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n_individuals: 20,
            obs_min: 2,
            obs_max: 10,
            age_min: 1.0,
            age_max: 25.0,
            mean_variance: 400.0,
            mean_lengthscale: 5.0,
            individual_variance: 100.0,
            individual_lengthscale: 3.0,
            noise_variance: 25.0,
            prior_mean_constant: 200.0,
        }
    }
}

impl SimulateConfig {
    fn to_synth(&self) -> Result<SynthConfig> {
        if self.n_individuals == 0 {
            return Err(Error::InvalidConfig("n_individuals must be >= 1".into()));
        }
        Ok(SynthConfig {
            n_individuals: self.n_individuals,
            observations_per_individual: (self.obs_min, self.obs_max),
            age_range: (self.age_min, self.age_max),
            mean_process: KernelParams::new(self.mean_variance, self.mean_lengthscale)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?,
            individual_process: KernelParams::new(
                self.individual_variance,
                self.individual_lengthscale,
            )
            .map_err(|e| Error::InvalidConfig(e.to_string()))?,
            noise: NoiseParams::new(self.noise_variance)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?,
            prior_mean_constant: self.prior_mean_constant,
        })
    }
}

/// On-disk config file: the run section plus an optional simulate section.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigFile {
    #[serde(flatten)]
    pub run: RunConfig,
    pub simulate: Option<SimulateConfig>,
}

/// Flag-level overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub hp_mode: Option<HpMode>,
    pub n_restarts: Option<usize>,
    pub em_max_iter: Option<usize>,
    pub em_rel_tol: Option<f64>,
    pub grid_extra_resolution: Option<usize>,
    pub train_fraction: Option<f64>,
}

/// Loads the config file (if any) and applies flag overrides.
pub fn effective_config(path: Option<&Path>, overrides: &Overrides) -> Result<ConfigFile> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str::<ConfigFile>(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
        }
        None => ConfigFile::default(),
    };
    let o = overrides;
    if let Some(v) = o.seed {
        cfg.run.seed = v;
    }
    if let Some(v) = o.hp_mode {
        cfg.run.hp_mode = v;
    }
    if let Some(v) = o.n_restarts {
        cfg.run.n_restarts = v;
    }
    if let Some(v) = o.em_max_iter {
        cfg.run.em_max_iter = v;
    }
    if let Some(v) = o.em_rel_tol {
        cfg.run.em_rel_tol = v;
    }
    if let Some(v) = o.grid_extra_resolution {
        cfg.run.grid_extra_resolution = v;
    }
    if let Some(v) = o.train_fraction {
        cfg.run.train_fraction = v;
    }
    if !(cfg.run.train_fraction > 0.0 && cfg.run.train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train_fraction {} outside (0, 1)",
            cfg.run.train_fraction
        )));
    }
    if cfg.run.n_restarts == 0 {
        return Err(Error::InvalidConfig("restarts must be >= 1".into()));
    }
    Ok(cfg)
}

/// Explicit age list (`1,2,3`) or `start:stop:count` grid.
#[derive(Debug, Clone)]
pub enum TargetSpec {
    List(Vec<f64>),
    Grid { start: f64, stop: f64, count: usize },
}

impl TargetSpec {
    pub fn parse_list(text: &str) -> Result<Self> {
        let ages: Vec<f64> = text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidConfig(format!("bad target age `{s}`")))
            })
            .collect::<Result<_>>()?;
        if ages.is_empty() {
            return Err(Error::InvalidConfig("empty target list".into()));
        }
        Ok(TargetSpec::List(ages))
    }

    pub fn parse_grid(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidConfig(format!(
                "grid spec `{text}` is not start:stop:count"
            )));
        }
        let start: f64 = parts[0]
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad grid start `{}`", parts[0])))?;
        let stop: f64 = parts[1]
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad grid stop `{}`", parts[1])))?;
        let count: usize = parts[2]
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad grid count `{}`", parts[2])))?;
        if count == 0 || stop < start {
            return Err(Error::InvalidConfig(format!(
                "grid spec `{text}` is degenerate"
            )));
        }
        Ok(TargetSpec::Grid { start, stop, count })
    }

    pub fn ages(&self) -> Vec<f64> {
        match self {
            TargetSpec::List(ages) => ages.clone(),
            TargetSpec::Grid { start, stop, count } => (0..*count)
                .map(|i| {
                    if *count == 1 {
                        *start
                    } else {
                        start + (stop - start) * i as f64 / (*count as f64 - 1.0)
                    }
                })
                .collect(),
        }
    }
}

/// Maps an error to the documented exit codes: 1 usage/config, 2 data,
/// 3 numerical failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) | Error::InvalidLevel(_) => 1,
        Error::NotPositiveDefinite { .. }
        | Error::OptimizerFailed { .. }
        | Error::AllRestartsFailed { .. }
        | Error::GridMembership { .. }
        | Error::NotSymmetric { .. } => 3,
        _ => 2,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or_else(|| Path::new(".")))?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn sidecar_path(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

#[derive(Serialize)]
struct Meta<'a, T: Serialize> {
    format_version: &'a str,
    command: &'a str,
    config: serde_json::Value,
    #[serde(flatten)]
    extra: T,
}

fn write_meta<T: Serialize>(path: &Path, command: &str, config: serde_json::Value, extra: T) -> Result<()> {
    let meta = Meta {
        format_version: MODEL_FORMAT_VERSION,
        command,
        config,
        extra,
    };
    write_atomic(path, serde_json::to_string_pretty(&meta)?.as_bytes())
}

fn format_float(v: f64) -> String {
    format!("{v}")
}

/// `simulate`: synthesize a cohort plus its ground-truth latent mean.
pub fn cmd_simulate(cfg: &ConfigFile, output: &Path) -> Result<()> {
    let sim = cfg.simulate.clone().unwrap_or_default();
    let synth = sim.to_synth()?;
    let (cohort, truth) = synthesize_cohort(&synth, cfg.run.seed)?;

    let mut cohort_csv = Vec::new();
    write_cohort_csv(&cohort, &mut cohort_csv)?;
    write_atomic(output, &cohort_csv)?;

    let mut truth_csv = String::from("age_years,true_mean\n");
    for (age, mean) in truth.points() {
        truth_csv.push_str(&format!("{},{}\n", format_float(age), format_float(mean)));
    }
    write_atomic(&sidecar_path(output, "truth.csv"), truth_csv.as_bytes())?;

    #[derive(Serialize)]
    struct Extra {
        simulate: SimulateConfig,
        n_individuals: usize,
        n_observations: usize,
    }
    write_meta(
        &sidecar_path(output, "meta.json"),
        "simulate",
        cfg.run.to_value(),
        Extra {
            simulate: sim,
            n_individuals: cohort.len(),
            n_observations: cohort.n_observations(),
        },
    )?;
    println!(
        "wrote {} individuals ({} observations) to {}",
        cohort.len(),
        cohort.n_observations(),
        output.display()
    );
    Ok(())
}

/// `split`: constraint-first train/test split with a manifest.
pub fn cmd_split(cfg: &ConfigFile, input: &Path, out_dir: &Path) -> Result<()> {
    let (cohort, warnings) = parse_cohort_csv(fs::File::open(input)?)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let spec = SplitSpec::new(cfg.run.train_fraction, cfg.run.seed)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let (train, test) = quasi_random_split(&cohort, &spec)?;

    fs::create_dir_all(out_dir)?;
    let mut train_csv = Vec::new();
    write_cohort_csv(&train, &mut train_csv)?;
    write_atomic(&out_dir.join("train.csv"), &train_csv)?;
    let mut test_csv = Vec::new();
    write_cohort_csv(&test, &mut test_csv)?;
    write_atomic(&out_dir.join("test.csv"), &test_csv)?;

    #[derive(Serialize)]
    struct Extra {
        n_train: usize,
        n_test: usize,
        train_ids: Vec<String>,
        test_ids: Vec<String>,
        singleton_ids: Vec<String>,
    }
    write_meta(
        &out_dir.join("manifest.json"),
        "split",
        cfg.run.to_value(),
        Extra {
            n_train: train.len(),
            n_test: test.len(),
            train_ids: train.individuals().iter().map(|i| i.id().to_string()).collect(),
            test_ids: test.individuals().iter().map(|i| i.id().to_string()).collect(),
            singleton_ids: cohort
                .individuals()
                .iter()
                .filter(|i| i.n_observations() == 1)
                .map(|i| i.id().to_string())
                .collect(),
        },
    )?;
    println!(
        "split {} individuals into {} train / {} test under {}",
        cohort.len(),
        train.len(),
        test.len(),
        out_dir.display()
    );
    Ok(())
}

/// `train`: multi-restart EM training; prints one line per restart.
pub fn cmd_train(cfg: &ConfigFile, input: &Path, output: &Path) -> Result<()> {
    let (cohort, warnings) = parse_cohort_csv(fs::File::open(input)?)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let outcome = train_with_restarts(
        &cohort,
        cfg.run.hp_mode,
        cfg.run.n_restarts,
        cfg.run.seed,
        &cfg.run.train_config(),
    )?;
    for r in &outcome.restarts {
        match (&r.log_likelihood, &r.error) {
            (Some(ll), _) => println!(
                "restart {:>3}: log-likelihood {} ({} EM iterations)",
                r.index,
                ll,
                r.em_iterations.unwrap_or(0)
            ),
            (None, Some(e)) => println!("restart {:>3}: failed: {e}", r.index),
            _ => {}
        }
    }
    println!(
        "selected restart {} with log-likelihood {}",
        outcome.model.restart_index, outcome.model.log_likelihood
    );
    let json = outcome.model.to_json(Some(cfg.run.to_value()))?;
    write_atomic(output, json.as_bytes())?;
    println!("wrote model to {}", output.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<TrainedModel> {
    let text = fs::read_to_string(path)?;
    let (model, _) = TrainedModel::from_json(&text)?;
    Ok(model)
}

fn model_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(format!("sha256:{:x}", sha2::Sha256::digest(&bytes)))
}

/// `predict`: trajectory prediction for one individual (possibly with no
/// observations yet) at explicit target ages.
pub fn cmd_predict(
    cfg: &ConfigFile,
    model_path: &Path,
    observations: Option<&Path>,
    targets: &TargetSpec,
    output: &Path,
) -> Result<()> {
    let model = load_model(model_path)?;
    let obs = match observations {
        Some(p) => {
            let (_, obs, warnings) = parse_individual_csv(fs::File::open(p)?)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            obs
        }
        None => Vec::new(),
    };
    let ages = targets.ages();
    let (kernel, noise, refit) = resolve_individual_params(&model, &obs)?;
    let prediction = predict_trajectory_with_params(&model, &obs, &ages, &kernel, &noise)?;

    let mut csv = String::from("age_years,mean,variance,lower95,upper95\n");
    for i in 0..prediction.len() {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            format_float(prediction.targets()[i]),
            format_float(prediction.mean()[i]),
            format_float(prediction.variance()[i]),
            format_float(prediction.lower95()[i]),
            format_float(prediction.upper95()[i]),
        ));
    }
    write_atomic(output, csv.as_bytes())?;

    #[derive(Serialize)]
    struct Extra {
        model_digest: String,
        individual_kernel: KernelParams,
        noise: NoiseParams,
        hp_refit: bool,
        n_observations: usize,
    }
    write_meta(
        &sidecar_path(output, "meta.json"),
        "predict",
        cfg.run.to_value(),
        Extra {
            model_digest: model_digest(model_path)?,
            individual_kernel: kernel,
            noise,
            hp_refit: refit,
            n_observations: obs.len(),
        },
    )?;
    println!(
        "wrote {} predicted ages to {}",
        prediction.len(),
        output.display()
    );
    Ok(())
}

/// `evaluate`: the held-out RMSE / coverage protocol. Test individuals with
/// fewer than two observations are skipped with a warning.
pub fn cmd_evaluate(cfg: &ConfigFile, model_path: &Path, test_path: &Path, output: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    let (cohort, warnings) = parse_cohort_csv(fs::File::open(test_path)?)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let mut skipped = Vec::new();
    let mut usable = Vec::new();
    for ind in cohort.individuals() {
        if ind.n_observations() < 2 {
            eprintln!(
                "warning: skipping test individual {} with {} observation(s)",
                ind.id(),
                ind.n_observations()
            );
            skipped.push(ind.id().to_string());
        } else {
            usable.push(ind.clone());
        }
    }
    if usable.is_empty() {
        return Err(Error::InvalidParameter(
            "no test individual has two or more observations".into(),
        ));
    }
    let test = crate::data::Cohort::new(usable)?;
    let report = evaluate_test_set(&model, &test, cfg.run.seed)?;

    let mut csv = Vec::new();
    write_report_csv(&report, &mut csv)?;
    write_atomic(output, &csv)?;

    #[derive(Serialize)]
    struct Extra<'a> {
        model_digest: String,
        skipped: Vec<String>,
        #[serde(flatten)]
        report: &'a crate::evaluate::EvaluationReport,
    }
    write_meta(
        &sidecar_path(output, "json"),
        "evaluate",
        cfg.run.to_value(),
        Extra {
            model_digest: model_digest(model_path)?,
            skipped,
            report: &report,
        },
    )?;
    println!(
        "evaluated {} cases: mean rmse {} (unweighted) / {} (pooled), CIC-95 {}",
        report.per_case.len(),
        report.mean_rmse_unweighted,
        report.mean_rmse_pooled,
        report.overall_cic95
    );
    Ok(())
}

/// `curves`: population mean curve with credible band over a grid, with an
/// optional normative-band overlay and coverage summary.
pub fn cmd_curves(
    cfg: &ConfigFile,
    model_path: &Path,
    band_path: Option<&Path>,
    grid: &TargetSpec,
    output: &Path,
) -> Result<()> {
    let model = load_model(model_path)?;
    let band = band_path
        .map(|p| parse_band_csv(fs::File::open(p).map_err(Error::Io)?))
        .transpose()?;
    let ages = grid.ages();
    let (kernel, noise, _) = resolve_individual_params(&model, &[])?;
    let prediction = predict_trajectory_with_params(&model, &[], &ages, &kernel, &noise)?;

    let coverage = band
        .as_ref()
        .map(|b| band_coverage(&prediction, b))
        .transpose()?;

    let mut csv = String::new();
    if band.is_some() {
        csv.push_str("age_years,mean,lower95,upper95,band_lower,band_upper\n");
    } else {
        csv.push_str("age_years,mean,lower95,upper95\n");
    }
    for i in 0..prediction.len() {
        let age = prediction.targets()[i];
        csv.push_str(&format!(
            "{},{},{},{}",
            format_float(age),
            format_float(prediction.mean()[i]),
            format_float(prediction.lower95()[i]),
            format_float(prediction.upper95()[i]),
        ));
        if let Some(b) = &band {
            let (lo, hi) = b.limits_at(age)?;
            csv.push_str(&format!(",{},{}", format_float(lo), format_float(hi)));
        }
        csv.push('\n');
    }
    write_atomic(output, csv.as_bytes())?;

    if let Some(c) = &coverage {
        println!("mean_in_band {}", c.mean_in_band);
        println!("interval_in_band {}", c.interval_in_band);
    }

    #[derive(Serialize)]
    struct Extra {
        model_digest: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        band_coverage: Option<crate::evaluate::BandCoverage>,
    }
    write_meta(
        &sidecar_path(output, "meta.json"),
        "curves",
        cfg.run.to_value(),
        Extra {
            model_digest: model_digest(model_path)?,
            band_coverage: coverage,
        },
    )?;
    println!("wrote {} curve rows to {}", prediction.len(), output.display());
    Ok(())
}
