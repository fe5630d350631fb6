//! Export the population curve with its 95% credible band and compare it
//! against a normative reference band.
//!
//! ```bash
//! cargo run --release --example export_curves
//! ```

use magma::data::{synthesize_cohort, NormativeBand, SynthConfig};
use magma::evaluate::band_coverage;
use magma::gp::{KernelParams, NoiseParams};
use magma::predict::predict_trajectory;
use magma::train::{train_with_restarts, HpMode, TrainConfig};

fn main() -> magma::Result<()> {
    let config = SynthConfig {
        n_individuals: 18,
        observations_per_individual: (2, 7),
        age_range: (2.0, 24.0),
        mean_process: KernelParams::new(100.0, 4.0)?,
        individual_process: KernelParams::new(25.0, 2.5)?,
        noise: NoiseParams::new(1.0)?,
        prior_mean_constant: 200.0,
    };
    let (cohort, _) = synthesize_cohort(&config, 29)?;
    let outcome = train_with_restarts(&cohort, HpMode::Common, 5, 2, &TrainConfig::default())?;
    let model = outcome.model;

    let targets: Vec<f64> = (0..45).map(|i| 2.0 + 0.5 * i as f64).collect();
    let curve = predict_trajectory(&model, &[], &targets)?;

    // A stand-in for published reference limits.
    let band = NormativeBand::new(vec![
        (0.0, 120.0, 320.0),
        (12.0, 140.0, 340.0),
        (25.0, 110.0, 300.0),
    ])?;
    let coverage = band_coverage(&curve, &band)?;

    println!("age_years,mean,lower95,upper95,band_lower,band_upper");
    for i in 0..curve.len() {
        let age = curve.targets()[i];
        let (lo, hi) = band.limits_at(age)?;
        println!(
            "{:.1},{:.2},{:.2},{:.2},{:.1},{:.1}",
            age,
            curve.mean()[i],
            curve.lower95()[i],
            curve.upper95()[i],
            lo,
            hi
        );
    }
    eprintln!(
        "\nmean_in_band {:.3}, interval_in_band {:.3}",
        coverage.mean_in_band, coverage.interval_in_band
    );
    Ok(())
}
