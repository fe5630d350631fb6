//! Predict a new individual's full trajectory from two blood tests, and
//! show how the credible band tightens as observations arrive.
//!
//! ```bash
//! cargo run --release --example predict_trajectory
//! ```

use magma::data::{synthesize_cohort, Observation, SynthConfig};
use magma::gp::{KernelParams, NoiseParams};
use magma::predict::predict_trajectory;
use magma::train::{train_with_restarts, HpMode, TrainConfig};

fn main() -> magma::Result<()> {
    let config = SynthConfig {
        n_individuals: 20,
        observations_per_individual: (3, 7),
        age_range: (2.0, 24.0),
        mean_process: KernelParams::new(100.0, 4.0)?,
        individual_process: KernelParams::new(25.0, 2.5)?,
        noise: NoiseParams::new(1.0)?,
        prior_mean_constant: 200.0,
    };
    let (cohort, _) = synthesize_cohort(&config, 21)?;
    let outcome = train_with_restarts(&cohort, HpMode::Common, 5, 1, &TrainConfig::default())?;
    let model = outcome.model;
    println!(
        "trained on {} individuals (log-likelihood {:.2})",
        cohort.len(),
        model.log_likelihood
    );

    // A new patient with two measurements.
    let obs = vec![
        Observation::new(6.0, 212.0)?,
        Observation::new(9.5, 196.0)?,
    ];
    let targets: Vec<f64> = (0..11).map(|i| 2.0 + 2.2 * i as f64).collect();

    let population = predict_trajectory(&model, &[], &targets)?;
    let personal = predict_trajectory(&model, &obs, &targets)?;

    println!("\n{:>6} {:>28} {:>28}", "age", "population prior", "given two observations");
    for (i, &age) in targets.iter().enumerate() {
        println!(
            "{:>6.1} {:>9.1} [{:>7.1}, {:>7.1}] {:>9.1} [{:>7.1}, {:>7.1}]",
            age,
            population.mean()[i],
            population.lower95()[i],
            population.upper95()[i],
            personal.mean()[i],
            personal.lower95()[i],
            personal.upper95()[i],
        );
    }
    println!("\nobservations were at ages 6.0 and 9.5; note the band pinching there.");
    Ok(())
}
