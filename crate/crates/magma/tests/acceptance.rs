//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Criteria with runtime budgets measure their own wall
//! time; a shared lock keeps the measurements serial.
//!
//! ```bash
//! cargo test -p magma --test acceptance -- --nocapture
//! ```

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use magma::data::{
    prediction_evaluation_split, quasi_random_split, synthesize_cohort, Cohort, Individual,
    Observation, SplitSpec, SynthConfig,
};
use magma::evaluate::{evaluate_test_set, rmse};
use magma::gp::{kernel_matrix, KernelParams, NoiseParams};
use magma::predict::{predict_trajectory_with_params, NewIndividualObjective};
use magma::train::{
    e_step, em_train, train_with_restarts, HpMode, IndividualObjective,
    IndividualParams, MeanProcessObjective, ModelParams, TrainConfig, TrainedModel,
};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn gate(criterion: usize, description: &str, pass: bool, detail: String) {
    println!(
        "acceptance criterion {criterion}: {} — {description} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn individual(id: &str, points: &[(f64, f64)]) -> Individual {
    Individual::new(
        id,
        points
            .iter()
            .map(|&(a, v)| Observation::new(a, v).unwrap())
            .collect(),
    )
    .unwrap()
}

/// Benchmark-scale generative configuration shared by several criteria.
fn synth_config(n_individuals: usize, obs: (usize, usize)) -> SynthConfig {
    SynthConfig {
        n_individuals,
        observations_per_individual: obs,
        age_range: (1.0, 21.0),
        mean_process: KernelParams::new(100.0, 4.0).unwrap(),
        individual_process: KernelParams::new(25.0, 2.5).unwrap(),
        noise: NoiseParams::new(1.0).unwrap(),
        prior_mean_constant: 200.0,
    }
}

fn shared_init(m0: f64) -> ModelParams {
    ModelParams {
        mean_kernel: KernelParams::new(200.0, 4.0).unwrap(),
        prior_mean_constant: m0,
        individual: IndividualParams::Shared(
            KernelParams::new(50.0, 2.0).unwrap(),
            NoiseParams::new(10.0).unwrap(),
        ),
    }
}

fn per_individual_init(cohort: &Cohort, m0: f64) -> ModelParams {
    let mut map = BTreeMap::new();
    for ind in cohort.individuals() {
        map.insert(
            ind.id().to_string(),
            (
                KernelParams::new(50.0, 2.0).unwrap(),
                NoiseParams::new(10.0).unwrap(),
            ),
        );
    }
    ModelParams {
        mean_kernel: KernelParams::new(200.0, 4.0).unwrap(),
        prior_mean_constant: m0,
        individual: IndividualParams::PerIndividual(map),
    }
}

/// Joint-Gaussian brute-force oracle for the hyper-posterior: condition the
/// stacked Gaussian over (mean-process values on the grid, all observations)
/// on the observations by explicit matrix inversion.
fn e_step_oracle(
    individuals: &[Individual],
    mean_kernel: &KernelParams,
    m0: f64,
    params: &IndividualParams,
    grid: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let g = grid.len();
    let mut obs_ages = Vec::new();
    let mut obs_values = Vec::new();
    let mut blocks = Vec::new();
    for ind in individuals {
        blocks.push((obs_ages.len(), ind.n_observations()));
        obs_ages.extend(ind.ages());
        obs_values.extend(ind.values());
    }
    let n = obs_ages.len();
    let k_gg = kernel_matrix(mean_kernel, grid, grid).unwrap();
    let k_go = kernel_matrix(mean_kernel, grid, &obs_ages).unwrap();
    let mut k_oo = kernel_matrix(mean_kernel, &obs_ages, &obs_ages).unwrap();
    for ((start, len), ind) in blocks.iter().zip(individuals) {
        let (kp, np) = params.get(ind.id()).unwrap();
        let psi = kernel_matrix(kp, &ind.ages(), &ind.ages()).unwrap();
        for a in 0..*len {
            for b in 0..*len {
                k_oo[(start + a, start + b)] += psi[(a, b)];
            }
            k_oo[(start + a, start + a)] += np.noise_variance();
        }
    }
    let inv = k_oo.try_inverse().expect("oracle inverse");
    let resid = DVector::from_vec(obs_values) - DVector::from_element(n, m0);
    let mean = DVector::from_element(g, m0) + &k_go * &inv * resid;
    let cov = k_gg - &k_go * inv * k_go.transpose();
    (mean, cov)
}

#[test]
fn criterion_1_e_step_matches_brute_force_oracle() {
    let _guard = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for instance in 0..20 {
        let g = rng.gen_range(1..=4usize);
        let mut grid: Vec<f64> = Vec::new();
        while grid.len() < g {
            let age = rng.gen_range(1.0..20.0);
            if grid.iter().all(|&a: &f64| (a - age).abs() > 0.2) {
                grid.push(age);
            }
        }
        grid.sort_by(f64::total_cmp);
        let n_ind = rng.gen_range(1..=3usize);
        let individuals: Vec<Individual> = (0..n_ind)
            .map(|i| {
                let k = rng.gen_range(1..=g);
                let mut idx: Vec<usize> = (0..g).collect();
                for j in (1..idx.len()).rev() {
                    idx.swap(j, rng.gen_range(0..=j));
                }
                let mut points: Vec<(f64, f64)> = idx[..k]
                    .iter()
                    .map(|&j| (grid[j], rng.gen_range(-2.0..2.0)))
                    .collect();
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                individual(&format!("p{instance}_{i}"), &points)
            })
            .collect();
        let mean_kernel =
            KernelParams::new(rng.gen_range(0.5..3.0), rng.gen_range(1.0..6.0)).unwrap();
        let m0 = rng.gen_range(-1.0..1.0);
        let mut map = BTreeMap::new();
        for ind in &individuals {
            map.insert(
                ind.id().to_string(),
                (
                    KernelParams::new(rng.gen_range(0.3..2.0), rng.gen_range(0.5..4.0)).unwrap(),
                    NoiseParams::new(rng.gen_range(0.05..0.5)).unwrap(),
                ),
            );
        }
        let params = IndividualParams::PerIndividual(map);
        let hp = e_step(&individuals, &mean_kernel, m0, &params, &grid).unwrap();
        let (want_mean, want_cov) = e_step_oracle(&individuals, &mean_kernel, m0, &params, &grid);
        for i in 0..g {
            worst = worst.max((hp.mean()[i] - want_mean[i]).abs());
            for j in 0..g {
                worst = worst.max((hp.covariance()[(i, j)] - want_cov[(i, j)]).abs());
            }
        }
    }
    let elapsed = t0.elapsed();
    gate(
        1,
        "e_step equals the joint-Gaussian oracle on 20 randomized instances",
        worst < 1e-8 && elapsed < Duration::from_secs(5),
        format!("max abs err {worst:.2e}, elapsed {elapsed:.2?}"),
    );
}

#[test]
fn criterion_2_em_monotonicity_both_modes() {
    let _guard = serial();
    let t0 = Instant::now();
    let mut worst_drop = 0.0f64;
    let mut runs = 0;
    for seed in 0..5u64 {
        let cfg = SynthConfig {
            n_individuals: 20,
            observations_per_individual: (4, 16),
            age_range: (1.0, 25.0),
            mean_process: KernelParams::new(400.0, 5.0).unwrap(),
            individual_process: KernelParams::new(100.0, 3.0).unwrap(),
            noise: NoiseParams::new(25.0).unwrap(),
            prior_mean_constant: 200.0,
        };
        let (cohort, _) = synthesize_cohort(&cfg, 1000 + seed).unwrap();
        let m0 = cohort.global_value_mean();
        for mode in [HpMode::Common, HpMode::IndividualSpecific] {
            let init = match mode {
                HpMode::Common => shared_init(m0),
                HpMode::IndividualSpecific => per_individual_init(&cohort, m0),
            };
            let model = em_train(&cohort, mode, &init, &TrainConfig::default()).unwrap();
            runs += 1;
            for w in model.ll_trace.windows(2) {
                let slack = 1e-6 * w[0].abs().max(1.0);
                if w[1] < w[0] - slack {
                    worst_drop = worst_drop.max(w[0] - w[1]);
                }
            }
        }
    }
    let elapsed = t0.elapsed();
    gate(
        2,
        "observed-data log-likelihood non-decreasing per EM iteration, both HP modes",
        worst_drop == 0.0 && elapsed < Duration::from_secs(60),
        format!("{runs} runs, worst drop {worst_drop:.2e}, elapsed {elapsed:.2?}"),
    );
}

fn central_difference(f: &dyn Fn(&[f64]) -> f64, z: &[f64], h: f64) -> Vec<f64> {
    (0..z.len())
        .map(|k| {
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[k] += h;
            zm[k] -= h;
            (f(&zp) - f(&zm)) / (2.0 * h)
        })
        .collect()
}

fn worst_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let denom = a.abs().max(n.abs());
            if denom < 1e-8 {
                0.0
            } else {
                ((a - n) / denom).abs()
            }
        })
        .fold(0.0, f64::max)
}

#[test]
fn criterion_3_analytic_gradients_match_finite_differences() {
    let _guard = serial();
    let mut rng = ChaCha12Rng::seed_from_u64(303);
    let mut worst = 0.0f64;

    for instance in 0..10 {
        // A small random cohort and its hyper-posterior at random params.
        let n_ind = rng.gen_range(2..=3usize);
        let individuals: Vec<Individual> = (0..n_ind)
            .map(|i| {
                let k = rng.gen_range(2..=4usize);
                let mut points: Vec<(f64, f64)> = (0..k)
                    .map(|_| (rng.gen_range(1.0..20.0), rng.gen_range(-2.0..2.0)))
                    .collect();
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                points.dedup_by(|b, a| (b.0 - a.0).abs() < 0.05);
                individual(&format!("g{instance}_{i}"), &points)
            })
            .collect();
        let cohort = Cohort::new(individuals.clone()).unwrap();
        let grid = magma::train::working_grid(&cohort, 0);
        let mean_kernel =
            KernelParams::new(rng.gen_range(0.5..3.0), rng.gen_range(1.0..6.0)).unwrap();
        let shared = IndividualParams::Shared(
            KernelParams::new(rng.gen_range(0.3..2.0), rng.gen_range(0.5..4.0)).unwrap(),
            NoiseParams::new(rng.gen_range(0.05..0.5)).unwrap(),
        );
        let m0 = rng.gen_range(-1.0..1.0);
        let hp = e_step(&individuals, &mean_kernel, m0, &shared, &grid).unwrap();

        let z = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-0.5..1.5),
            rng.gen_range(-1.0..1.0),
        ];

        let mean_obj = MeanProcessObjective::new(&hp).unwrap();
        let (_, grad) = mean_obj.value_grad(&z).unwrap();
        let fd = central_difference(&|z| mean_obj.value(z).unwrap(), &z, 1e-5);
        worst = worst.max(worst_relative_error(&grad, &fd));

        let ind_obj = IndividualObjective::for_cohort(&hp, &individuals).unwrap();
        let zb = [z[0], z[1], rng.gen_range(-2.0..0.0)];
        let (_, grad) = ind_obj.value_grad(&zb).unwrap();
        let fd = central_difference(&|z| ind_obj.value(z).unwrap(), &zb, 1e-5);
        worst = worst.max(worst_relative_error(&grad, &fd));

        // Prediction-time refit objective against a trained-model stand-in.
        let model = TrainedModel {
            hp_mode: HpMode::IndividualSpecific,
            params: ModelParams {
                mean_kernel,
                prior_mean_constant: m0,
                individual: shared.clone(),
            },
            hyper_posterior: hp.clone(),
            log_likelihood: 0.0,
            ll_trace: vec![0.0],
            em_iterations: 0,
            restart_index: 0,
            seed: 0,
        };
        let obs: Vec<Observation> = (0..3)
            .map(|_| Observation::new(rng.gen_range(1.0..20.0), rng.gen_range(-2.0..2.0)).unwrap())
            .collect();
        let new_obj = NewIndividualObjective::new(&model, &obs).unwrap();
        let (_, grad) = new_obj.value_grad(&zb).unwrap();
        let fd = central_difference(&|z| new_obj.value(z).unwrap(), &zb, 1e-5);
        worst = worst.max(worst_relative_error(&grad, &fd));
    }
    gate(
        3,
        "analytic gradients of all optimized objectives match central differences",
        worst < 1e-4,
        format!("worst relative error {worst:.2e} over 10 instances x 3 objectives"),
    );
}

#[test]
fn criterion_4_credible_interval_calibration() {
    let _guard = serial();
    let t0 = Instant::now();
    let mut covered = 0.0f64;
    let mut total = 0.0f64;
    for seed in 0..5u64 {
        let (cohort, _) = synthesize_cohort(&synth_config(60, (3, 6)), 9000 + seed).unwrap();
        let (train, test) =
            quasi_random_split(&cohort, &SplitSpec::new(0.5, seed).unwrap()).unwrap();
        assert_eq!(train.len(), 30);
        assert_eq!(test.len(), 30);
        let outcome =
            train_with_restarts(&train, HpMode::Common, 10, seed, &TrainConfig::default())
                .unwrap();
        let report = evaluate_test_set(&outcome.model, &test, seed).unwrap();
        let n: usize = report.per_case.iter().map(|c| c.n_evaluation).sum();
        covered += report.overall_cic95 * n as f64;
        total += n as f64;
    }
    let cic = covered / total;
    let elapsed = t0.elapsed();
    gate(
        4,
        "pooled CIC-95 on well-specified held-out data lies in [0.90, 0.99]",
        (0.90..=0.99).contains(&cic) && total >= 200.0 && elapsed < Duration::from_secs(300),
        format!("CIC-95 {cic:.4} over {total} evaluation points, elapsed {elapsed:.1?}"),
    );
}

#[test]
fn criterion_5_mean_recovery_improves_with_cohort_size() {
    let _guard = serial();
    let mut rmse_small = Vec::new();
    let mut rmse_large = Vec::new();
    for seed in 0..5u64 {
        let (full, truth) = synthesize_cohort(&synth_config(40, (3, 6)), 4200 + seed).unwrap();
        let sub = Cohort::new(full.individuals()[..10].to_vec()).unwrap();
        for (cohort, out) in [(&sub, &mut rmse_small), (&full, &mut rmse_large)] {
            let outcome =
                train_with_restarts(cohort, HpMode::Common, 6, seed, &TrainConfig::default())
                    .unwrap();
            let hp = &outcome.model.hyper_posterior;
            let m_hat: Vec<f64> = hp.mean().iter().copied().collect();
            let true_mean: Vec<f64> = hp
                .grid()
                .iter()
                .map(|&a| truth.mean_at(a).expect("grid age tabulated"))
                .collect();
            out.push(rmse(&m_hat, &true_mean).unwrap());
        }
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (small, large) = (avg(&rmse_small), avg(&rmse_large));
    gate(
        5,
        "hyper-posterior mean RMSE vs truth decreases strictly from 10 to 40 individuals",
        large < small,
        format!("mean recovery RMSE {small:.3} (n=10) -> {large:.3} (n=40), 5 seeds"),
    );
}

#[test]
fn criterion_6_protocol_fidelity() {
    let _guard = serial();
    // 31 individuals, 6 singletons, deterministic shapes.
    let mut individuals = Vec::new();
    for i in 0..6 {
        individuals.push(individual(
            &format!("s{i:02}"),
            &[(4.0 + i as f64 * 3.0, 180.0 + i as f64)],
        ));
    }
    for i in 0..25 {
        let n = 2 + i % 5;
        let points: Vec<(f64, f64)> = (0..n)
            .map(|k| (3.0 + i as f64 * 0.7 + k as f64 * 2.0, 170.0 + k as f64 * 4.0))
            .collect();
        individuals.push(individual(&format!("m{i:02}"), &points));
    }
    let cohort = Cohort::new(individuals).unwrap();
    let (train, test) = quasi_random_split(&cohort, &SplitSpec::new(0.75, 17).unwrap()).unwrap();
    let singletons_in_train = train
        .individuals()
        .iter()
        .filter(|i| i.n_observations() == 1)
        .count();
    let split_ok = train.len() == 23
        && test.len() == 8
        && singletons_in_train == 6
        && test.individuals().iter().all(|i| i.n_observations() >= 2);

    let mut case_ok = true;
    let mut sizes = Vec::new();
    for (n, want) in [(5usize, (2usize, 3usize)), (9, (4, 5)), (2, (1, 1))] {
        let points: Vec<(f64, f64)> = (0..n).map(|k| (2.0 + k as f64, 100.0)).collect();
        let ind = individual("case", &points);
        let (p, e) = prediction_evaluation_split(&ind, 7).unwrap();
        sizes.push((n, p.len(), e.len()));
        case_ok &= (p.len(), e.len()) == want;
    }
    gate(
        6,
        "31-patient cohort splits 23/8 with singletons in train; case splits match the protocol",
        split_ok && case_ok,
        format!(
            "train {} / test {}, {} singletons in train; (n, pred, eval) = {:?}",
            train.len(),
            test.len(),
            singletons_in_train,
            sizes
        ),
    );
}

#[test]
fn criterion_7_restart_selection_and_training_speed() {
    let _guard = serial();
    let cfg = SynthConfig {
        n_individuals: 23,
        observations_per_individual: (2, 8),
        age_range: (1.0, 25.0),
        mean_process: KernelParams::new(400.0, 5.0).unwrap(),
        individual_process: KernelParams::new(100.0, 3.0).unwrap(),
        noise: NoiseParams::new(25.0).unwrap(),
        prior_mean_constant: 200.0,
    };
    // Seed chosen so the cohort has ~114 observations.
    let (cohort, _) = synthesize_cohort(&cfg, 22).unwrap();
    let n_obs = cohort.n_observations();

    let mut all_ok = true;
    let mut details = format!("{} individuals / {n_obs} observations", cohort.len());
    for mode in [HpMode::Common, HpMode::IndividualSpecific] {
        let t0 = Instant::now();
        let outcome =
            train_with_restarts(&cohort, mode, 25, 7, &TrainConfig::default()).unwrap();
        let elapsed = t0.elapsed();
        let reported_max = outcome
            .restarts
            .iter()
            .filter_map(|r| r.log_likelihood)
            .fold(f64::NEG_INFINITY, f64::max);
        let selection_ok = outcome.model.log_likelihood == reported_max
            && outcome.restarts.len() == 25
            && outcome.restarts[outcome.model.restart_index].log_likelihood
                == Some(outcome.model.log_likelihood);
        all_ok &= selection_ok && elapsed < Duration::from_secs(120);
        details.push_str(&format!("; {mode}: {elapsed:.1?}, max ll {reported_max:.2}"));
    }
    gate(
        7,
        "25-restart training selects the maximum log-likelihood within 120 s per HP mode",
        all_ok,
        details,
    );
}

/// Plain GP regression with kernel `k0 + k_ind`, constant mean, by explicit
/// inversion.
fn single_task_oracle(
    mean_kernel: &KernelParams,
    ind_kernel: &KernelParams,
    noise_var: f64,
    m0: f64,
    obs: &[Observation],
    targets: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let t: Vec<f64> = obs.iter().map(|o| o.age()).collect();
    let sum = |xs: &[f64], ys: &[f64]| {
        kernel_matrix(mean_kernel, xs, ys).unwrap() + kernel_matrix(ind_kernel, xs, ys).unwrap()
    };
    let mut k_tt = sum(&t, &t);
    for i in 0..t.len() {
        k_tt[(i, i)] += noise_var;
    }
    let inv = k_tt.try_inverse().unwrap();
    let k_st = sum(targets, &t);
    let k_ss = sum(targets, targets);
    let resid = DVector::from_fn(t.len(), |i, _| obs[i].value() - m0);
    let mean = DVector::from_element(targets.len(), m0) + &k_st * &inv * resid;
    let cov = k_ss - &k_st * inv * k_st.transpose();
    (
        mean.iter().copied().collect(),
        (0..targets.len()).map(|i| cov[(i, i)]).collect(),
    )
}

#[test]
fn criterion_8_single_task_reduction() {
    let _guard = serial();
    let ind = individual(
        "only",
        &[(2.0, 196.0), (5.0, 204.0), (9.0, 213.0), (14.0, 207.0), (18.0, 199.0)],
    );
    let cohort = Cohort::new(vec![ind.clone()]).unwrap();
    let model = em_train(
        &cohort,
        HpMode::Common,
        &shared_init(cohort.global_value_mean()),
        &TrainConfig::default(),
    )
    .unwrap();

    // Self-prediction must see the individual's data exactly once: rebuild
    // the hyper-posterior without it (the bare prior) before conditioning.
    let grid = model.hyper_posterior.grid().to_vec();
    let prior_hp = e_step(
        &[],
        &model.params.mean_kernel,
        model.params.prior_mean_constant,
        &model.params.individual,
        &grid,
    )
    .unwrap();
    let mut prior_model = model.clone();
    prior_model.hyper_posterior = prior_hp;

    let (kernel, noise) = match &model.params.individual {
        IndividualParams::Shared(k, n) => (*k, *n),
        _ => unreachable!(),
    };
    let targets = [3.0, 7.5, 12.0, 16.0, 20.0];
    let pred = predict_trajectory_with_params(
        &prior_model,
        ind.observations(),
        &targets,
        &kernel,
        &noise,
    )
    .unwrap();
    let (want_mean, want_var) = single_task_oracle(
        &model.params.mean_kernel,
        &kernel,
        noise.noise_variance(),
        model.params.prior_mean_constant,
        ind.observations(),
        &targets,
    );
    let mut worst = 0.0f64;
    for i in 0..targets.len() {
        worst = worst.max((pred.mean()[i] - want_mean[i]).abs());
        worst = worst.max((pred.variance()[i] - want_var[i]).abs());
    }
    gate(
        8,
        "one-individual training + self-prediction equals direct GP regression with k0 + k_ind",
        worst < 1e-6,
        format!("max abs deviation {worst:.2e}"),
    );
}

#[test]
fn criterion_9_cli_byte_determinism() {
    let _guard = serial();
    use std::fs;
    use std::process::Command;

    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_magma");
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().expect("spawn magma");
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{"seed": 11, "n_restarts": 2, "grid_extra_resolution": 25,
           "simulate": {"n_individuals": 10, "obs_min": 2, "obs_max": 6}}"#,
    )
    .unwrap();

    let mut artifacts: Vec<(String, String)> = Vec::new();
    for pass in ["x", "y"] {
        let root = dir.path().join(pass);
        fs::create_dir_all(&root).unwrap();
        let p = |name: &str| root.join(name).to_str().unwrap().to_string();
        let cfg = config.to_str().unwrap();

        run(&["simulate", "--config", cfg, "--output", &p("cohort.csv")]);
        run(&[
            "split",
            "--config",
            cfg,
            "--input",
            &p("cohort.csv"),
            "--out-dir",
            &p("split"),
        ]);
        run(&[
            "train",
            "--config",
            cfg,
            "--input",
            &p("split/train.csv"),
            "--output",
            &p("model.json"),
        ]);
        run(&[
            "predict",
            "--config",
            cfg,
            "--model",
            &p("model.json"),
            "--grid",
            "2:24:12",
            "--output",
            &p("pred.csv"),
        ]);
        run(&[
            "evaluate",
            "--config",
            cfg,
            "--model",
            &p("model.json"),
            "--test",
            &p("split/test.csv"),
            "--output",
            &p("report.csv"),
        ]);
        run(&[
            "curves",
            "--config",
            cfg,
            "--model",
            &p("model.json"),
            "--grid",
            "2:24:12",
            "--output",
            &p("curves.csv"),
        ]);

        for rel in [
            "cohort.csv",
            "cohort.truth.csv",
            "cohort.meta.json",
            "split/train.csv",
            "split/test.csv",
            "split/manifest.json",
            "model.json",
            "pred.csv",
            "pred.meta.json",
            "report.csv",
            "report.json",
            "curves.csv",
            "curves.meta.json",
        ] {
            let bytes = fs::read(root.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"));
            artifacts.push((format!("{pass}/{rel}"), sha256_hex(&bytes)));
        }
    }
    let half = artifacts.len() / 2;
    let mut all_equal = true;
    let mut mismatch = String::new();
    for i in 0..half {
        if artifacts[i].1 != artifacts[half + i].1 {
            all_equal = false;
            mismatch = artifacts[i].0.clone();
            break;
        }
    }
    gate(
        9,
        "every CLI command rerun with identical inputs and seed is byte-identical",
        all_equal,
        if all_equal {
            format!("{half} artifacts compared")
        } else {
            format!("first mismatch at {mismatch}")
        },
    );
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::Digest;
    format!("{:x}", sha2::Sha256::digest(bytes))
}
