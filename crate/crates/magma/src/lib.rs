//! Multi-task Gaussian process regression with a shared latent mean
//! process, for sparse, irregularly sampled longitudinal data.
//!
//! Each individual's trajectory is modelled as the sum of one latent mean
//! GP, common to the whole cohort, and an individual-specific GP plus
//! observation noise. Training runs expectation-maximization over the
//! hyperparameters (shared or per-individual) with multi-restart selection;
//! prediction conditions a new individual's observations against the
//! learned population prior and reports calibrated 95% credible intervals.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`gp`] — kernels, jittered Cholesky, Gaussian density and conditioning;
//! - [`data`] — cohort CSV ingestion, splits, synthetic benchmark cohorts;
//! - [`train`] — the EM loop, working grid, and model serialization;
//! - [`predict`] — trajectory prediction with credible intervals;
//! - [`evaluate`] — RMSE / interval-coverage protocol and normative bands;
//! - [`cli`] — the batch subcommands behind the `magma` binary.
//!
//! Each major capability has a runnable example under `examples/`
//! (`simulate_cohort`, `train_model`, `predict_trajectory`,
//! `evaluate_holdout`, `export_curves`).

pub mod cli;
pub mod data;
mod error;
pub mod evaluate;
pub mod gp;
pub mod optim;
pub mod predict;
pub mod train;

pub use data::{Cohort, Individual, Observation, SplitSpec, SynthConfig};
pub use error::{Error, Result};
pub use evaluate::{CaseResult, EvaluationReport};
pub use gp::{GaussianDist, KernelParams, NoiseParams};
pub use predict::TrajectoryPrediction;
pub use train::{HpMode, HyperPosterior, TrainConfig, TrainedModel};
