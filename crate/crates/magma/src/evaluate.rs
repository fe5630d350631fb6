//! Held-out evaluation protocol: per-case RMSE and 95% credible-interval
//! coverage, plus normative-band comparison.
//!
//! Each test individual's observations are split in half (conditioning vs
//! scoring); the trajectory is predicted at the scoring ages from the
//! conditioning half, and errors and interval coverage are aggregated per
//! case and across the set.

use serde::Serialize;

use crate::data::{derive_seed_for, prediction_evaluation_split, Cohort, NormativeBand};
use crate::error::{Error, Result};
use crate::predict::{
    predict_trajectory_with_params, resolve_individual_params, TrajectoryPrediction,
};
use crate::train::{HpMode, TrainedModel};

/// Root mean squared error between two equal-length vectors.
pub fn rmse(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::DimensionMismatch {
            context: "rmse",
            expected: actual.len(),
            actual: predicted.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::EmptyInput("rmse".into()));
    }
    let ss: f64 = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a) * (p - a))
        .sum();
    Ok((ss / predicted.len() as f64).sqrt())
}

/// Fraction of actual values inside the closed interval `[lower, upper]`.
/// Boundary points count as covered.
pub fn cic95(lower: &[f64], upper: &[f64], actual: &[f64]) -> Result<f64> {
    if lower.len() != upper.len() || lower.len() != actual.len() {
        return Err(Error::DimensionMismatch {
            context: "cic95",
            expected: actual.len(),
            actual: lower.len().min(upper.len()),
        });
    }
    if actual.is_empty() {
        return Err(Error::EmptyInput("cic95".into()));
    }
    let covered = lower
        .iter()
        .zip(upper)
        .zip(actual)
        .filter(|((lo, hi), a)| *lo <= *a && *a <= *hi)
        .count();
    Ok(covered as f64 / actual.len() as f64)
}

/// One test individual's result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub case_id: String,
    pub n_prediction: usize,
    pub n_evaluation: usize,
    pub rmse: f64,
    pub cic95: f64,
}

/// Evaluation across a test cohort.
#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub per_case: Vec<CaseResult>,
    /// Plain mean of the per-case RMSEs.
    pub mean_rmse_unweighted: f64,
    /// `√(Σ nᵢ·rmseᵢ² / Σ nᵢ)`: the RMSE over all evaluation points pooled.
    pub mean_rmse_pooled: f64,
    /// Covered evaluation points over total evaluation points.
    pub overall_cic95: f64,
    pub hp_mode: HpMode,
    pub seed: u64,
    /// Whether per-individual hyperparameters were refit at prediction time
    /// (IndividualSpecific) or the shared set was reused (Common).
    pub hp_refit: bool,
}

/// Runs the split/predict/score protocol over every test individual.
///
/// Each individual's split seed derives from `(seed, id)` via the stated
/// FNV-1a hash, so adding or removing a patient never reshuffles the
/// others. Cases are reported sorted by id.
pub fn evaluate_test_set(
    model: &TrainedModel,
    test: &Cohort,
    seed: u64,
) -> Result<EvaluationReport> {
    let mut ids: Vec<&str> = test.individuals().iter().map(|i| i.id()).collect();
    ids.sort_unstable();

    let mut per_case = Vec::with_capacity(ids.len());
    let mut hp_refit = false;
    for id in ids {
        let ind = test.get(id).expect("id from this cohort");
        let split_seed = derive_seed_for(seed, "eval-split", id);
        let (pred_obs, eval_obs) = prediction_evaluation_split(ind, split_seed)?;
        let (kernel, noise, refit) = resolve_individual_params(model, &pred_obs)?;
        hp_refit |= refit;
        let targets: Vec<f64> = eval_obs.iter().map(|o| o.age()).collect();
        let prediction =
            predict_trajectory_with_params(model, &pred_obs, &targets, &kernel, &noise)?;
        let actual: Vec<f64> = eval_obs.iter().map(|o| o.value()).collect();
        per_case.push(CaseResult {
            case_id: id.to_string(),
            n_prediction: pred_obs.len(),
            n_evaluation: eval_obs.len(),
            rmse: rmse(prediction.mean(), &actual)?,
            cic95: cic95(prediction.lower95(), prediction.upper95(), &actual)?,
        });
    }

    let n_cases = per_case.len() as f64;
    let mean_rmse_unweighted = per_case.iter().map(|c| c.rmse).sum::<f64>() / n_cases;
    let total_eval: usize = per_case.iter().map(|c| c.n_evaluation).sum();
    let pooled_ss: f64 = per_case
        .iter()
        .map(|c| c.n_evaluation as f64 * c.rmse * c.rmse)
        .sum();
    let mean_rmse_pooled = (pooled_ss / total_eval as f64).sqrt();
    let covered: f64 = per_case
        .iter()
        .map(|c| c.cic95 * c.n_evaluation as f64)
        .sum();
    let overall_cic95 = covered / total_eval as f64;

    Ok(EvaluationReport {
        per_case,
        mean_rmse_unweighted,
        mean_rmse_pooled,
        overall_cic95,
        hp_mode: model.hp_mode,
        seed,
        hp_refit,
    })
}

/// Fractions of a predicted trajectory lying inside a normative band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandCoverage {
    /// Fraction of targets whose predictive mean is inside the band.
    pub mean_in_band: f64,
    /// Fraction of targets whose whole 95% interval is inside the band.
    pub interval_in_band: f64,
}

/// Compares a prediction against a normative band (linearly interpolated
/// between knots). Every target must lie within the band's age span.
pub fn band_coverage(
    prediction: &TrajectoryPrediction,
    band: &NormativeBand,
) -> Result<BandCoverage> {
    if prediction.is_empty() {
        return Err(Error::EmptyInput("band_coverage prediction".into()));
    }
    let n = prediction.len();
    let mut mean_in = 0usize;
    let mut interval_in = 0usize;
    for i in 0..n {
        let (lo, hi) = band.limits_at(prediction.targets()[i])?;
        if lo <= prediction.mean()[i] && prediction.mean()[i] <= hi {
            mean_in += 1;
        }
        if lo <= prediction.lower95()[i] && prediction.upper95()[i] <= hi {
            interval_in += 1;
        }
    }
    Ok(BandCoverage {
        mean_in_band: mean_in as f64 / n as f64,
        interval_in_band: interval_in as f64 / n as f64,
    })
}

/// Writes the report in the tabular CSV layout: one row per case, then the
/// two aggregate rows.
pub fn write_report_csv<W: std::io::Write>(
    report: &EvaluationReport,
    mut writer: W,
) -> Result<()> {
    writeln!(writer, "case,prediction,evaluation,rmse,cic95")?;
    for case in &report.per_case {
        writeln!(
            writer,
            "{},{},{},{},{}",
            case.case_id, case.n_prediction, case.n_evaluation, case.rmse, case.cic95
        )?;
    }
    writeln!(
        writer,
        "mean_unweighted,,,{},{}",
        report.mean_rmse_unweighted, report.overall_cic95
    )?;
    writeln!(
        writer,
        "mean_pooled,,,{},{}",
        report.mean_rmse_pooled, report.overall_cic95
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Individual, Observation, SynthConfig};
    use crate::gp::{KernelParams, NoiseParams};
    use crate::train::{HyperPosterior, IndividualParams, ModelParams};
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    #[test]
    fn rmse_identity_is_zero() {
        assert_eq!(rmse(&[5.0, 7.0, 9.0], &[5.0, 7.0, 9.0]).unwrap(), 0.0);
    }

    #[test]
    fn rmse_hand_value() {
        // √((9 + 16)/2) by hand.
        let got = rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(got, 3.5355339059327378, epsilon = 1e-12);
    }

    #[test]
    fn rmse_single_point_is_absolute_error() {
        assert_eq!(rmse(&[1.0], &[3.5]).unwrap(), 2.5);
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cic95_counts_closed_interval() {
        assert_eq!(
            cic95(&[0.0, 0.0], &[1.0, 1.0], &[0.5, 0.7]).unwrap(),
            1.0
        );
        assert_eq!(
            cic95(&[0.0, 0.0], &[1.0, 1.0], &[0.5, 2.0]).unwrap(),
            0.5
        );
        // Boundary counts as covered.
        assert_eq!(cic95(&[0.0], &[1.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(cic95(&[0.0], &[1.0], &[0.0]).unwrap(), 1.0);
        assert!(cic95(&[0.0], &[1.0, 2.0], &[0.5]).is_err());
        assert!(cic95(&[], &[], &[]).is_err());
    }

    /// A model whose hyper-posterior is a near-delta belief at a known
    /// curve: predictions reproduce the curve almost exactly.
    fn oracle_model(ages: &[f64], curve: impl Fn(f64) -> f64) -> TrainedModel {
        let n = ages.len();
        let mean = DVector::from_fn(n, |i, _| curve(ages[i]));
        let cov = DMatrix::from_diagonal(&DVector::from_element(n, 1e-8));
        TrainedModel {
            hp_mode: HpMode::Common,
            params: ModelParams {
                mean_kernel: KernelParams::new(1.0, 5.0).unwrap(),
                prior_mean_constant: 0.0,
                individual: IndividualParams::Shared(
                    KernelParams::new(1e-6, 5.0).unwrap(),
                    NoiseParams::new(1e-10).unwrap(),
                ),
            },
            hyper_posterior: HyperPosterior::new(
                ages.to_vec(),
                crate::gp::GaussianDist::new(mean, cov).unwrap(),
            )
            .unwrap(),
            log_likelihood: 0.0,
            ll_trace: vec![0.0],
            em_iterations: 0,
            restart_index: 0,
            seed: 0,
        }
    }

    #[test]
    fn evaluate_single_two_point_individual() {
        let ages = [1.0, 2.0, 3.0, 4.0];
        let model = oracle_model(&ages, |a| 10.0 + a);
        let ind = Individual::new(
            "p1",
            vec![
                Observation::new(1.0, 11.0).unwrap(),
                Observation::new(3.0, 13.0).unwrap(),
            ],
        )
        .unwrap();
        let test = Cohort::new(vec![ind]).unwrap();
        let report = evaluate_test_set(&model, &test, 5).unwrap();
        assert_eq!(report.per_case.len(), 1);
        assert_eq!(report.per_case[0].n_prediction, 1);
        assert_eq!(report.per_case[0].n_evaluation, 1);
        assert!(!report.hp_refit);
    }

    #[test]
    fn evaluate_perfect_oracle_on_noiseless_data() {
        // Values generated exactly on the oracle curve.
        let cfg = SynthConfig {
            n_individuals: 4,
            observations_per_individual: (2, 6),
            age_range: (2.0, 20.0),
            mean_process: KernelParams::new(25.0, 6.0).unwrap(),
            individual_process: KernelParams::new(1e-10, 3.0).unwrap(),
            noise: NoiseParams::new(1e-12).unwrap(),
            prior_mean_constant: 100.0,
        };
        let (cohort, truth) = crate::data::synthesize_cohort(&cfg, 31).unwrap();
        let mut ages: Vec<f64> = cohort
            .individuals()
            .iter()
            .flat_map(|i| i.ages())
            .collect();
        ages.sort_by(f64::total_cmp);
        ages.dedup_by(|b, a| (*b - *a).abs() <= 1e-9);
        let model = oracle_model(&ages, |a| truth.mean_at(a).unwrap());
        let report = evaluate_test_set(&model, &cohort, 17).unwrap();
        for case in &report.per_case {
            assert!(case.rmse < 1e-4, "case {} rmse {}", case.case_id, case.rmse);
        }
        assert_eq!(report.overall_cic95, 1.0);
    }

    #[test]
    fn evaluate_is_reproducible_and_order_invariant() {
        let ages = [1.0, 2.0, 3.0, 4.0, 5.0];
        let model = oracle_model(&ages, |a| 50.0 + 2.0 * a);
        let mk_ind = |id: &str, pts: &[(f64, f64)]| {
            Individual::new(
                id,
                pts.iter()
                    .map(|&(a, v)| Observation::new(a, v).unwrap())
                    .collect(),
            )
            .unwrap()
        };
        let a = mk_ind("a", &[(1.0, 52.0), (2.0, 53.5), (4.0, 58.5)]);
        let b = mk_ind("b", &[(2.0, 54.5), (5.0, 60.0)]);
        let fwd = Cohort::new(vec![a.clone(), b.clone()]).unwrap();
        let rev = Cohort::new(vec![b, a]).unwrap();
        let r1 = evaluate_test_set(&model, &fwd, 9).unwrap();
        let r2 = evaluate_test_set(&model, &rev, 9).unwrap();
        assert_eq!(r1.per_case, r2.per_case);
        assert_eq!(
            r1.mean_rmse_pooled.to_bits(),
            r2.mean_rmse_pooled.to_bits()
        );
        let r3 = evaluate_test_set(&model, &fwd, 9).unwrap();
        assert_eq!(r1.per_case, r3.per_case);
    }

    #[test]
    fn report_aggregates_recompute_from_rows() {
        let ages = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let model = oracle_model(&ages, |a| 50.0 + a * a * 0.3);
        let mk_ind = |id: &str, pts: &[(f64, f64)]| {
            Individual::new(
                id,
                pts.iter()
                    .map(|&(a, v)| Observation::new(a, v).unwrap())
                    .collect(),
            )
            .unwrap()
        };
        let test = Cohort::new(vec![
            mk_ind("a", &[(1.0, 51.0), (2.0, 52.0), (4.0, 55.0)]),
            mk_ind("b", &[(2.0, 50.5), (5.0, 57.0), (6.0, 61.0), (3.0, 52.0)]),
        ])
        .unwrap();
        let report = evaluate_test_set(&model, &test, 2).unwrap();
        let unweighted: f64 =
            report.per_case.iter().map(|c| c.rmse).sum::<f64>() / report.per_case.len() as f64;
        let total: usize = report.per_case.iter().map(|c| c.n_evaluation).sum();
        let pooled = (report
            .per_case
            .iter()
            .map(|c| c.n_evaluation as f64 * c.rmse * c.rmse)
            .sum::<f64>()
            / total as f64)
            .sqrt();
        let coverage = report
            .per_case
            .iter()
            .map(|c| c.cic95 * c.n_evaluation as f64)
            .sum::<f64>()
            / total as f64;
        assert_abs_diff_eq!(report.mean_rmse_unweighted, unweighted, epsilon = 1e-12);
        assert_abs_diff_eq!(report.mean_rmse_pooled, pooled, epsilon = 1e-12);
        assert_abs_diff_eq!(report.overall_cic95, coverage, epsilon = 1e-12);
        assert!(report.mean_rmse_pooled >= 0.0);
    }

    fn flat_prediction(targets: &[f64], mean: f64, sd: f64) -> TrajectoryPrediction {
        let model = oracle_model(targets, |_| mean);
        let kernel = KernelParams::new(sd * sd, 5.0).unwrap();
        let noise = NoiseParams::new(1e-12).unwrap();
        predict_trajectory_with_params(&model, &[], targets, &kernel, &noise).unwrap()
    }

    #[test]
    fn band_containing_everything_scores_one() {
        let pred = flat_prediction(&[1.0, 2.0, 3.0], 150.0, 1.0);
        let band = NormativeBand::new(vec![(0.0, 0.0, 1000.0), (10.0, 0.0, 1000.0)]).unwrap();
        let cov = band_coverage(&pred, &band).unwrap();
        assert_eq!(cov.mean_in_band, 1.0);
        assert_eq!(cov.interval_in_band, 1.0);
    }

    #[test]
    fn zero_width_band_on_the_mean_curve() {
        let pred = flat_prediction(&[1.0, 2.0, 3.0], 150.0, 1.0);
        // Band collapsed exactly onto the mean: means are inside (closed),
        // intervals are not.
        let m = pred.mean()[0];
        let band = NormativeBand::new(vec![(0.0, m, m), (10.0, m, m)]).unwrap();
        let cov = band_coverage(&pred, &band).unwrap();
        assert_eq!(cov.mean_in_band, 1.0);
        assert_eq!(cov.interval_in_band, 0.0);
    }

    #[test]
    fn band_half_span_construction() {
        // Mean constant 150; band upper 140 on the first half of the span,
        // 200 on the second half (switching steeply at age 5).
        let targets: Vec<f64> = (0..10).map(|i| 0.5 + i as f64).collect();
        let pred = flat_prediction(&targets, 150.0, 0.1);
        let band = NormativeBand::new(vec![
            (0.0, 100.0, 140.0),
            (4.999, 100.0, 140.0),
            (5.001, 100.0, 200.0),
            (10.0, 100.0, 200.0),
        ])
        .unwrap();
        let cov = band_coverage(&pred, &band).unwrap();
        assert_abs_diff_eq!(cov.mean_in_band, 0.5, epsilon = 1e-12);
        // Outside the span errors.
        let outside = flat_prediction(&[11.0], 150.0, 0.1);
        assert!(band_coverage(&outside, &band).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let ages = [1.0, 2.0, 3.0, 4.0];
        let model = oracle_model(&ages, |a| 10.0 * a);
        let test = Cohort::new(vec![Individual::new(
            "p1",
            vec![
                Observation::new(1.0, 10.0).unwrap(),
                Observation::new(3.0, 30.0).unwrap(),
            ],
        )
        .unwrap()])
        .unwrap();
        let report = evaluate_test_set(&model, &test, 0).unwrap();
        let mut buf = Vec::new();
        write_report_csv(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "case,prediction,evaluation,rmse,cic95");
        assert_eq!(lines.len(), 1 + report.per_case.len() + 2);
        assert!(lines[lines.len() - 2].starts_with("mean_unweighted,,,"));
        assert!(lines[lines.len() - 1].starts_with("mean_pooled,,,"));
    }

    proptest! {
        #[test]
        fn rmse_symmetry_and_shift_invariance(
            xs in proptest::collection::vec(-100.0f64..100.0, 1..20),
            shift in -50.0f64..50.0,
        ) {
            let ys: Vec<f64> = xs.iter().map(|x| x * 0.7 + 3.0).collect();
            let a = rmse(&xs, &ys).unwrap();
            let b = rmse(&ys, &xs).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            let xs2: Vec<f64> = xs.iter().map(|x| x + shift).collect();
            let ys2: Vec<f64> = ys.iter().map(|y| y + shift).collect();
            let c = rmse(&xs2, &ys2).unwrap();
            prop_assert!((a - c).abs() < 1e-9 * a.abs().max(1.0));
        }

        #[test]
        fn cic95_invariant_under_common_reordering(
            n in 1usize..20,
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let lower: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..0.0)).collect();
            let upper: Vec<f64> = lower.iter().map(|l| l + rng.gen_range(0.0..2.0)).collect();
            let actual: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let base = cic95(&lower, &upper, &actual).unwrap();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let l2: Vec<f64> = idx.iter().map(|&i| lower[i]).collect();
            let u2: Vec<f64> = idx.iter().map(|&i| upper[i]).collect();
            let a2: Vec<f64> = idx.iter().map(|&i| actual[i]).collect();
            prop_assert_eq!(cic95(&l2, &u2, &a2).unwrap(), base);
        }
    }
}
