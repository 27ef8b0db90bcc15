//! Cross-module statistical validation: simulator law against the exact
//! oracle, fluctuation centering modes, hitting-time scaling and the
//! concurrency discipline of the experiment harness.

use seirlab_core::experiment::{run_experiment, ExperimentConfig};
use seirlab_core::fields::{fluctuation_pairings, Centering};
use seirlab_core::hydro::{solve_hydrodynamic, SolverSettings};
use seirlab_core::mdp::hitting_time_empirical;
use seirlab_core::model::{InitialLaw, Kernel, RateModel, ScalingSchedule, TorusFunction};
use seirlab_core::oracle::{build_generator, digit, evolve, exact_moments, Distribution};
use seirlab_core::ssa::{replica_rng, sample_initial_with_rng, simulate_with_rng, Trajectory};
use std::f64::consts::PI;

fn smooth_model(m: usize) -> RateModel {
    RateModel {
        lambda: Kernel::Product {
            lambda1: TorusFunction::from_fn(m, |u| 1.2 + 0.4 * (2.0 * PI * u).cos()),
            lambda2: TorusFunction::from_fn(m, |u| 1.0 + 0.3 * (2.0 * PI * u).sin()),
        },
        psi: TorusFunction::from_fn(m, |u| 0.9 + 0.2 * (2.0 * PI * u).sin()),
        phi: TorusFunction::from_fn(m, |u| 0.7 + 0.2 * (2.0 * PI * u).cos()),
    }
}

fn smooth_law(m: usize) -> InitialLaw {
    InitialLaw {
        rho0: TorusFunction::from_fn(m, |u| 0.55 + 0.1 * (2.0 * PI * u).cos()),
        rho1: TorusFunction::from_fn(m, |u| 0.15 + 0.05 * (2.0 * PI * u).sin()),
        rho2: TorusFunction::from_fn(m, |u| 0.15 - 0.05 * (2.0 * PI * u).cos()),
    }
}

#[test]
fn initial_sampler_matches_product_law_chi_square() {
    // N = 4, non-constant law: the empirical joint distribution over 10^6
    // draws must match the product measure from the exact marginals.
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let m = 16;
    let law = smooth_law(m);
    let n = 4;
    let draws = 1_000_000u64;
    let dim = 1usize << (2 * n);
    let expected = Distribution::product_initial(&law, n);
    let mut counts = vec![0u64; dim];
    let mut rng = replica_rng(424242, 0);
    for _ in 0..draws {
        let config = sample_initial_with_rng(&law, n, &mut rng);
        let packed = config
            .states
            .iter()
            .enumerate()
            .fold(0usize, |acc, (i, s)| acc | ((*s as usize) << (2 * i)));
        counts[packed] += 1;
    }
    let mut chi2 = 0.0;
    let mut dof = 0usize;
    for (count, p) in counts.iter().zip(&expected.p) {
        let want = p * draws as f64;
        if want > 5.0 {
            chi2 += (*count as f64 - want).powi(2) / want;
            dof += 1;
        }
    }
    let dist = ChiSquared::new((dof - 1) as f64).unwrap();
    let p_value = 1.0 - dist.cdf(chi2);
    assert!(
        p_value > 0.001,
        "chi-square {chi2:.1} on {} cells gives p = {p_value:.5}",
        dof
    );
}

#[test]
fn oracle_mean_centering_matches_exact_expectations() {
    // N = 6: the oracle-provided centering means are the exact occupation
    // probabilities (recomputed here straight from the distribution), and
    // the replica average of the centered field drifts to 0.
    let m = 16;
    let model = smooth_model(m);
    let law = smooth_law(m);
    let n = 6;
    let horizon = 1.0;
    let times: Vec<f64> = vec![0.25, 0.5, 1.0];
    let q = build_generator(&model, n).unwrap();
    let p0 = Distribution::product_initial(&law, n);
    let path: Vec<Distribution> = times.iter().map(|&t| evolve(&q, &p0, t).unwrap()).collect();
    let report = exact_moments(n, &path, &times);
    let means = report.vertex_means();

    // Independent recomputation of E 1{xi_t(i) = k} by direct summation.
    for (ti, dist) in path.iter().enumerate() {
        for i in 0..n {
            for k in 0..3 {
                let direct: f64 = dist
                    .p
                    .iter()
                    .enumerate()
                    .filter(|(x, _)| digit(*x, i) == k)
                    .map(|(_, p)| p)
                    .sum();
                let stored = means.means[ti][k][i];
                assert!(
                    (direct - stored).abs() < 1e-8,
                    "vertex {i} comp {k} at t index {ti}: {direct} vs {stored}"
                );
            }
        }
    }

    let schedule = ScalingSchedule::new(0.75).unwrap();
    let replicas: Vec<Trajectory> = (0..20_000u64)
        .map(|r| {
            let mut rng = replica_rng(777, r);
            let init = sample_initial_with_rng(&law, n, &mut rng);
            simulate_with_rng(&model, &init, horizon, &mut rng, None)
        })
        .collect();
    let f = TorusFunction::from_fn(m, |u| 1.0 + 0.3 * (2.0 * PI * u).cos());
    let paths = fluctuation_pairings(
        &replicas,
        std::slice::from_ref(&f),
        &times,
        &schedule,
        Centering::OracleMean(&means),
    )
    .unwrap();
    let r = replicas.len() as f64;
    let gamma = schedule.gamma(n);
    for ti in 0..times.len() {
        for k in 0..3 {
            let mean: f64 = paths.iter().map(|p| p.values[0][k][ti]).sum::<f64>() / r;
            // eta has mean 0 under exact centering; per-replica sd is at
            // most sqrt(N)/gamma * ||f||.
            let sigma = (n as f64).sqrt() / gamma * 1.3 / r.sqrt();
            assert!(
                mean.abs() < 4.0 * sigma + 1e-12,
                "k = {k}, t index {ti}: replica mean {mean} vs sigma {sigma}"
            );
        }
    }
}

#[test]
fn hydrodynamic_centering_flags_bias() {
    let m = 24;
    let model = smooth_model(m);
    let law = smooth_law(m);
    let schedule = ScalingSchedule::new(0.75).unwrap();
    let hydro = solve_hydrodynamic(&model, &law, 1.0, &SolverSettings::default()).unwrap();
    let replicas: Vec<Trajectory> = (0..4u64)
        .map(|r| {
            let mut rng = replica_rng(31, r);
            let init = sample_initial_with_rng(&law, 200, &mut rng);
            simulate_with_rng(&model, &init, 1.0, &mut rng, None)
        })
        .collect();
    let f = TorusFunction::constant(m, 1.0);
    let times = vec![0.0, 0.5, 1.0];
    let paths = fluctuation_pairings(
        &replicas,
        std::slice::from_ref(&f),
        &times,
        &schedule,
        Centering::HydrodynamicMean(&hydro.path),
    )
    .unwrap();
    for p in &paths {
        assert!(p.centering_bias_o_inv_gamma);
        for k in 0..3 {
            assert!(p.values[0][k].iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn hitting_time_fluctuations_shrink_with_population() {
    // Replica spread of (N / gamma_N)(tau_c^N - tau_c) shrinks as N grows
    // at fixed exponent.
    let m = 24;
    let model = smooth_model(m);
    let law = smooth_law(m);
    let schedule = ScalingSchedule::new(0.75).unwrap();
    let shape = TorusFunction::from_fn(m, |u| -(1.0 + 0.2 * (2.0 * PI * u).cos()));
    let tests = [shape.clone(), shape.clone(), shape];
    let horizon = 1.0;
    let hydro = solve_hydrodynamic(&model, &law, horizon, &SolverSettings::default()).unwrap();
    let pairings = hydro.path.sum_pairings(&tests);
    let c = pairings[0] + 0.5 * (pairings.last().unwrap() - pairings[0]);
    let limit = seirlab_core::hydro::hitting_time_limit(&hydro.path, &tests, c).unwrap();

    let spread = |n: usize, salt: u64| -> f64 {
        let replicas = 400u64;
        let scale = n as f64 / schedule.gamma(n);
        let values: Vec<f64> = (0..replicas)
            .map(|r| {
                let mut rng = replica_rng(salt, r);
                let init = sample_initial_with_rng(&law, n, &mut rng);
                let traj = simulate_with_rng(&model, &init, horizon, &mut rng, None);
                let tau = hitting_time_empirical(&traj, &tests, c);
                assert!(tau.is_finite(), "every replica crosses the interior level");
                scale * (tau - limit.tau)
            })
            .collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var =
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
        assert!(
            mean.abs() < 4.0 * (var / values.len() as f64).sqrt() + 0.05,
            "scaled hitting fluctuations centered near 0, got mean {mean}"
        );
        var.sqrt()
    };
    let sd_small = spread(500, 91);
    let sd_large = spread(2000, 92);
    // (N/gamma_N) tau-fluctuations scale like N^{1/2 - a} = N^{-1/4}:
    // expect a factor ~ (500/2000)^{1/4} ~ 0.71, allow slack.
    assert!(
        sd_large < 0.95 * sd_small,
        "spread must shrink with N: sd(500) = {sd_small}, sd(2000) = {sd_large}"
    );
}

#[test]
fn concurrent_experiment_writers_do_not_interleave() {
    // Eight simultaneous runs into distinct output directories must all
    // produce valid, independently parseable summaries.
    const CONFIG: &str = r#"
[experiment]
kind = "tilting-identity"
seed = 5
horizon = 0.5
replicas = 32
n_list = [10]

[model]
lambda1 = "1.2+0.4*cos(2*pi*u)"
lambda2 = "1+0.3*sin(2*pi*u)"
psi = "0.9+0.2*sin(2*pi*u)"
phi = "0.7+0.2*cos(2*pi*u)"

[initial]
rho0 = "0.55+0.1*cos(2*pi*u)"
rho1 = "0.15+0.05*sin(2*pi*u)"
rho2 = "0.15-0.05*cos(2*pi*u)"

[scaling]
a = 0.75

[grid]
m = 16
"#;
    let base = std::env::temp_dir().join(format!("seirlab-stress-{}", std::process::id()));
    std::fs::create_dir_all(&base).unwrap();
    let handles: Vec<_> = (0..8)
        .map(|w| {
            let dir = base.join(format!("worker{w}"));
            std::thread::spawn(move || {
                let config = ExperimentConfig::from_toml(CONFIG).unwrap();
                run_experiment(&config, &dir).unwrap()
            })
        })
        .collect();
    let summaries: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let first = summaries[0].checks[0].value.to_bits();
    for (w, summary) in summaries.iter().enumerate() {
        assert_eq!(
            summary.checks[0].value.to_bits(),
            first,
            "worker {w} diverged"
        );
        let text =
            std::fs::read_to_string(base.join(format!("worker{w}")).join("results.csv")).unwrap();
        assert!(text.starts_with("check,"), "worker {w} wrote a corrupt table");
        assert_eq!(text.lines().count(), summary.checks.len() + 1);
    }
    std::fs::remove_dir_all(&base).ok();
}
