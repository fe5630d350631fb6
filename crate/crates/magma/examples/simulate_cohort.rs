//! Draw a synthetic longitudinal cohort from the generative model and write
//! it out in the cohort CSV format, next to its ground-truth latent mean.
//!
//! ```bash
//! cargo run --release --example simulate_cohort
//! ```

use magma::data::{synthesize_cohort, write_cohort_csv, SynthConfig};
use magma::gp::{KernelParams, NoiseParams};

fn main() -> magma::Result<()> {
    let config = SynthConfig {
        n_individuals: 12,
        observations_per_individual: (1, 8),
        age_range: (2.0, 24.0),
        // Blood-biomarker scale: values around 200 ng/ml, population trend with a
        // ~5-year correlation length, smaller per-individual wiggles.
        mean_process: KernelParams::new(400.0, 5.0)?,
        individual_process: KernelParams::new(100.0, 3.0)?,
        noise: NoiseParams::new(25.0)?,
        prior_mean_constant: 200.0,
    };
    let (cohort, truth) = synthesize_cohort(&config, 7)?;

    let dir = std::env::temp_dir().join("magma_simulate_example");
    std::fs::create_dir_all(&dir)?;
    let cohort_path = dir.join("cohort.csv");
    write_cohort_csv(&cohort, std::fs::File::create(&cohort_path)?)?;
    let mut truth_csv = String::from("age_years,true_mean\n");
    for (age, mean) in truth.points() {
        truth_csv.push_str(&format!("{age},{mean}\n"));
    }
    let truth_path = dir.join("cohort.truth.csv");
    std::fs::write(&truth_path, truth_csv)?;

    println!(
        "cohort: {} individuals, {} observations",
        cohort.len(),
        cohort.n_observations()
    );
    for ind in cohort.individuals().iter().take(4) {
        let ages: Vec<String> = ind
            .observations()
            .iter()
            .map(|o| format!("{:.1}", o.age()))
            .collect();
        println!("  {}: {} obs at ages [{}]", ind.id(), ind.n_observations(), ages.join(", "));
    }
    println!("wrote {}", cohort_path.display());
    println!("wrote {}", truth_path.display());
    Ok(())
}
