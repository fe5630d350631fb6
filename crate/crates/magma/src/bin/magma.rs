//! Batch CLI for the magma library: simulate, split, train, predict,
//! evaluate, curves. Exit codes: 0 success, 1 usage/config error, 2 data
//! error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use magma::cli::{self, Overrides, TargetSpec};
use magma::train::HpMode;

#[derive(Parser)]
#[command(name = "magma", version, about = "Multi-task GP regression with a shared latent mean")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ConfigFlags {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed driving every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Hyperparameter sharing: common | individual.
    #[arg(long, value_parser = parse_hp_mode, global = true)]
    hp_mode: Option<HpMode>,
    /// Training restarts.
    #[arg(long, global = true)]
    restarts: Option<usize>,
    #[arg(long, global = true)]
    em_max_iter: Option<usize>,
    #[arg(long, global = true)]
    em_rel_tol: Option<f64>,
    /// Refinement points added to the working grid.
    #[arg(long, global = true)]
    grid_resolution: Option<usize>,
    #[arg(long, global = true)]
    train_fraction: Option<f64>,
}

fn parse_hp_mode(s: &str) -> Result<HpMode, String> {
    match s {
        "common" => Ok(HpMode::Common),
        "individual" => Ok(HpMode::IndividualSpecific),
        other => Err(format!("`{other}` is not common|individual")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a cohort CSV plus its ground-truth latent mean.
    Simulate {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Output cohort CSV path.
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Split a cohort into train/test CSVs with a manifest.
    Split {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Input cohort CSV.
        #[arg(long, short)]
        input: PathBuf,
        /// Output directory (train.csv, test.csv, manifest.json).
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model by multi-restart EM.
    Train {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Training cohort CSV.
        #[arg(long, short)]
        input: PathBuf,
        /// Output model JSON path.
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Predict one individual's trajectory at target ages.
    Predict {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Model JSON from `train`.
        #[arg(long)]
        model: PathBuf,
        /// Observations CSV for one individual (may be header-only; omit
        /// for a pure population-prior curve).
        #[arg(long)]
        observations: Option<PathBuf>,
        /// Comma-separated target ages.
        #[arg(long, conflicts_with = "grid")]
        targets: Option<String>,
        /// Target grid start:stop:count.
        #[arg(long)]
        grid: Option<String>,
        /// Output prediction CSV path.
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Score a model on a held-out test cohort.
    Evaluate {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Model JSON from `train`.
        #[arg(long)]
        model: PathBuf,
        /// Test cohort CSV.
        #[arg(long)]
        test: PathBuf,
        /// Output report CSV path (JSON written alongside).
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Export the population curve with credible band (and normative-band
    /// overlay).
    Curves {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Model JSON from `train`.
        #[arg(long)]
        model: PathBuf,
        /// Normative band CSV (age_years,lower,upper).
        #[arg(long)]
        band: Option<PathBuf>,
        /// Output grid start:stop:count.
        #[arg(long)]
        grid: String,
        /// Output curves CSV path.
        #[arg(long, short)]
        output: PathBuf,
    },
}

impl ConfigFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            hp_mode: self.hp_mode,
            n_restarts: self.restarts,
            em_max_iter: self.em_max_iter,
            em_rel_tol: self.em_rel_tol,
            grid_extra_resolution: self.grid_resolution,
            train_fraction: self.train_fraction,
        }
    }
}

fn run(command: Command) -> magma::Result<()> {
    match command {
        Command::Simulate { flags, output } => {
            let cfg = cli::effective_config(flags.config.as_deref(), &flags.overrides())?;
            cli::cmd_simulate(&cfg, &output)
        }
        Command::Split {
            flags,
            input,
            out_dir,
        } => {
            let cfg = cli::effective_config(flags.config.as_deref(), &flags.overrides())?;
            cli::cmd_split(&cfg, &input, &out_dir)
        }
        Command::Train {
            flags,
            input,
            output,
        } => {
            let cfg = cli::effective_config(flags.config.as_deref(), &flags.overrides())?;
            cli::cmd_train(&cfg, &input, &output)
        }
        Command::Predict {
            flags,
            model,
            observations,
            targets,
            grid,
            output,
        } => {
            let cfg = cli::effective_config(flags.config.as_deref(), &flags.overrides())?;
            let spec = match (targets, grid) {
                (Some(t), None) => TargetSpec::parse_list(&t)?,
                (None, Some(g)) => TargetSpec::parse_grid(&g)?,
                _ => {
                    return Err(magma::Error::InvalidConfig(
                        "exactly one of --targets or --grid is required".into(),
                    ))
                }
            };
            cli::cmd_predict(&cfg, &model, observations.as_deref(), &spec, &output)
        }
        Command::Evaluate {
            flags,
            model,
            test,
            output,
        } => {
            let cfg = cli::effective_config(flags.config.as_deref(), &flags.overrides())?;
            cli::cmd_evaluate(&cfg, &model, &test, &output)
        }
        Command::Curves {
            flags,
            model,
            band,
            grid,
            output,
        } => {
            let cfg = cli::effective_config(flags.config.as_deref(), &flags.overrides())?;
            let spec = TargetSpec::parse_grid(&grid)?;
            cli::cmd_curves(&cfg, &model, band.as_deref(), &spec, &output)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
