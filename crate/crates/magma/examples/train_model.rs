//! Train the multi-task GP on a synthetic cohort under both
//! hyperparameter-sharing regimes and compare the selected fits.
//!
//! ```bash
//! cargo run --release --example train_model
//! ```

use magma::data::{synthesize_cohort, SynthConfig};
use magma::gp::{KernelParams, NoiseParams};
use magma::train::{train_with_restarts, HpMode, IndividualParams, TrainConfig};

fn main() -> magma::Result<()> {
    let config = SynthConfig {
        n_individuals: 15,
        observations_per_individual: (2, 7),
        age_range: (2.0, 24.0),
        mean_process: KernelParams::new(100.0, 4.0)?,
        individual_process: KernelParams::new(25.0, 2.5)?,
        noise: NoiseParams::new(1.0)?,
        prior_mean_constant: 200.0,
    };
    let (cohort, _) = synthesize_cohort(&config, 11)?;
    println!(
        "training on {} individuals / {} observations",
        cohort.len(),
        cohort.n_observations()
    );

    for mode in [HpMode::Common, HpMode::IndividualSpecific] {
        let outcome = train_with_restarts(&cohort, mode, 5, 3, &TrainConfig::default())?;
        println!("\nmode {mode}:");
        for r in &outcome.restarts {
            match (r.log_likelihood, &r.error) {
                (Some(ll), _) => println!("  restart {}: log-likelihood {ll:.3}", r.index),
                (None, Some(e)) => println!("  restart {}: failed ({e})", r.index),
                _ => {}
            }
        }
        let model = &outcome.model;
        println!(
            "  selected restart {} after {} EM iterations, log-likelihood {:.3}",
            model.restart_index, model.em_iterations, model.log_likelihood
        );
        println!(
            "  mean process: variance {:.2}, lengthscale {:.2}, prior constant {:.1}",
            model.params.mean_kernel.variance(),
            model.params.mean_kernel.lengthscale(),
            model.params.prior_mean_constant
        );
        match &model.params.individual {
            IndividualParams::Shared(k, n) => println!(
                "  shared individual process: variance {:.2}, lengthscale {:.2}, noise {:.3}",
                k.variance(),
                k.lengthscale(),
                n.noise_variance()
            ),
            IndividualParams::PerIndividual(map) => {
                let (id, (k, n)) = map.iter().next().expect("non-empty");
                println!(
                    "  {} per-individual parameter sets (e.g. {id}: variance {:.2}, lengthscale {:.2}, noise {:.3})",
                    map.len(),
                    k.variance(),
                    k.lengthscale(),
                    n.noise_variance()
                );
            }
        }
    }
    Ok(())
}
