//! Reproducible batch experiments: configuration parsing, replica-parallel
//! execution with per-replica RNG streams, resumable outputs and pass/fail
//! summaries against the baked-in verification thresholds.
//!
//! Every experiment writes a `results.csv` with one row per check, a
//! `summary.json` carrying the manifest, and kind-specific payload tables.
//! Replica-level values are cached in `replicas.csv`; re-running skips the
//! replicas already present (matched by replica stream index) and reproduces
//! identical aggregates.

use crate::fields::empirical_pairings;
use crate::hydro::{hitting_time_limit, solve_hydrodynamic, solve_tilted, SolverSettings};
use crate::io::{self, build_bundle, IoError, ModelFile};
use crate::ldp::{
    eval_i1, i_dyn_closed, i_ini_closed, random_smooth_control, tilting_identity_estimate,
};
use crate::mdp::{build_propagator, hitting_time_empirical, j_contra, solve_skeleton};
use crate::model::{ModelBundle, TorusFunction};
use crate::oracle::{build_generator, evolve, exact_moments, moment_ode_rhs, Distribution};
use crate::ssa::{replica_rng, sample_initial_with_rng, simulate_with_rng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("i/o: {0}")]
    File(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("fewer than 2 distinct abscissae in rate fit")]
    DegenerateFit,
    #[error("module failure: {0}")]
    Module(String),
}

/// The named verification experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    OracleValidation,
    HydroConvergence,
    TiltedLln,
    TiltingIdentity,
    RateZero,
    CltVariance,
    HittingClt,
    SkeletonAudit,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::OracleValidation => "oracle-validation",
            ExperimentKind::HydroConvergence => "hydro-convergence",
            ExperimentKind::TiltedLln => "tilted-lln",
            ExperimentKind::TiltingIdentity => "tilting-identity",
            ExperimentKind::RateZero => "rate-zero",
            ExperimentKind::CltVariance => "clt-variance",
            ExperimentKind::HittingClt => "hitting-clt",
            ExperimentKind::SkeletonAudit => "skeleton-audit",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    pub seed: u64,
    #[serde(default)]
    pub replicas: Option<usize>,
    #[serde(default)]
    pub n_list: Vec<usize>,
    pub horizon: f64,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub output: Option<String>,
}

/// A full experiment description: the run parameters, the model sections
/// (same schema as a standalone model file) and optional threshold
/// overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(flatten)]
    pub model_file: ModelFile,
    #[serde(default)]
    pub thresholds: BTreeMap<String, f64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        if !config.experiment.n_list.windows(2).all(|w| w[0] < w[1]) {
            return Err(ExperimentError::Config(
                "n_list must be strictly ascending".into(),
            ));
        }
        Ok(config)
    }

    pub fn bundle(&self) -> Result<ModelBundle, ExperimentError> {
        Ok(build_bundle(&self.model_file)?)
    }

    fn threshold(&self, key: &str, default: f64) -> f64 {
        self.thresholds.get(key).copied().unwrap_or(default)
    }

    fn replicas(&self, default: usize) -> usize {
        self.experiment.replicas.unwrap_or(default)
    }

    fn steps(&self) -> usize {
        self.experiment.steps.unwrap_or(2000)
    }
}

/// One verified claim with its measured value and threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    /// "<=", ">=" or "abs<=" (absolute value against the threshold).
    pub comparison: String,
    pub pass: bool,
}

impl CheckResult {
    fn le(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            comparison: "<=".into(),
            pass: value <= threshold,
        }
    }

    fn ge(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            comparison: ">=".into(),
            pass: value >= threshold,
        }
    }

    fn abs_le(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            comparison: "abs<=".into(),
            pass: value.abs() <= threshold,
        }
    }
}

/// Reproducibility manifest of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub replica_streams: usize,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub checks: Vec<CheckResult>,
    pub pass: bool,
}

/// Ordinary least squares of `log_ps` against `xs`:
/// `(slope, intercept, slope standard error)`.
pub fn fit_rate(xs: &[f64], log_ps: &[f64]) -> Result<(f64, f64, f64), ExperimentError> {
    if xs.len() != log_ps.len() || xs.len() < 2 {
        return Err(ExperimentError::DegenerateFit);
    }
    let distinct = {
        let mut sorted: Vec<f64> = xs.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted.dedup();
        sorted.len()
    };
    if distinct < 2 {
        return Err(ExperimentError::DegenerateFit);
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = log_ps.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x).powi(2)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(log_ps)
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let rss: f64 = xs
        .iter()
        .zip(log_ps)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let stderr = if xs.len() > 2 {
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok((slope, intercept, stderr))
}

/// Per-replica value cache backing resumable runs. Rows are keyed by the
/// replica stream index; numbers round-trip bitwise through the CSV layer.
struct ReplicaCache {
    path: PathBuf,
    rows: BTreeMap<u64, Vec<f64>>,
    columns: Vec<String>,
}

impl ReplicaCache {
    fn load(path: PathBuf, columns: &[&str]) -> Result<Self, ExperimentError> {
        let mut rows = BTreeMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            for line in text.lines().skip(1) {
                if line.is_empty() {
                    continue;
                }
                let mut cells = line.split(',');
                let replica: u64 = cells
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| ExperimentError::Config("bad replica cache row".into()))?;
                let values: Vec<f64> = cells.map(|c| c.parse().unwrap_or(f64::NAN)).collect();
                if values.len() == columns.len() {
                    rows.insert(replica, values);
                }
            }
        }
        Ok(Self {
            path,
            rows,
            columns: columns.iter().map(|c| c.to_string()).collect(),
        })
    }

    /// Computes any missing replicas in parallel and persists the union.
    fn ensure(
        &mut self,
        replicas: u64,
        compute: impl Fn(u64) -> Vec<f64> + Sync,
    ) -> Result<(), ExperimentError> {
        let missing: Vec<u64> = (0..replicas).filter(|r| !self.rows.contains_key(r)).collect();
        let computed: Vec<(u64, Vec<f64>)> = missing
            .par_iter()
            .map(|&r| (r, compute(r)))
            .collect();
        for (r, values) in computed {
            self.rows.insert(r, values);
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(&self.path)?);
        writeln!(w, "replica,{}", self.columns.join(","))?;
        for (r, values) in self.rows.range(0..replicas) {
            let cells: Vec<String> = values.iter().map(|v| io::fmt_f64(*v)).collect();
            writeln!(w, "{r},{}", cells.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    fn column(&self, replicas: u64, idx: usize) -> Vec<f64> {
        self.rows
            .range(0..replicas)
            .map(|(_, values)| values[idx])
            .collect()
    }
}

fn standard_tests(m: usize) -> Vec<TorusFunction> {
    use std::f64::consts::PI;
    vec![
        TorusFunction::constant(m, 1.0),
        TorusFunction::from_fn(m, |u| (2.0 * PI * u).cos()),
        TorusFunction::from_fn(m, |u| (2.0 * PI * u).sin()),
        TorusFunction::from_fn(m, |u| (4.0 * PI * u).cos()),
        TorusFunction::from_fn(m, |u| 1.0 + 0.5 * (2.0 * PI * u).sin()),
    ]
}

/// Runs the configured experiment, writing results under `out_dir`.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<RunSummary, ExperimentError> {
    std::fs::create_dir_all(out_dir)?;
    let start = Instant::now();
    let bundle = config.bundle()?;
    let checks = match config.experiment.kind {
        ExperimentKind::OracleValidation => run_oracle_validation(config, &bundle, out_dir)?,
        ExperimentKind::HydroConvergence => run_hydro_convergence(config, &bundle, out_dir)?,
        ExperimentKind::TiltedLln => run_tilted_lln(config, &bundle, out_dir)?,
        ExperimentKind::TiltingIdentity => run_tilting_identity(config, &bundle, out_dir)?,
        ExperimentKind::RateZero => run_rate_zero(config, &bundle, out_dir)?,
        ExperimentKind::CltVariance => run_clt_variance(config, &bundle, out_dir)?,
        ExperimentKind::HittingClt => run_hitting_clt(config, &bundle, out_dir)?,
        ExperimentKind::SkeletonAudit => run_skeleton_audit(config, &bundle, out_dir)?,
    };
    let outputs = list_outputs(out_dir)?;
    let manifest = RunManifest {
        kind: config.experiment.kind.name().to_string(),
        config_hash: io::content_hash(config),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.experiment.seed,
        replica_streams: config.replicas(0),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        outputs,
    };
    let pass = checks.iter().all(|c| c.pass);
    let summary = RunSummary {
        manifest,
        checks,
        pass,
    };
    write_results_csv(out_dir, &summary.checks)?;
    io::write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Loads the summary a previous run left in `dir`.
pub fn load_summary(dir: &Path) -> Result<RunSummary, ExperimentError> {
    let text = std::fs::read_to_string(dir.join("summary.json"))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Config(e.to_string()))
}

fn write_results_csv(out_dir: &Path, checks: &[CheckResult]) -> Result<(), ExperimentError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(out_dir.join("results.csv"))?);
    writeln!(w, "check,value,threshold,comparison,pass")?;
    for c in checks {
        writeln!(
            w,
            "{},{},{},{},{}",
            c.name,
            io::fmt_f64(c.value),
            io::fmt_f64(c.threshold),
            c.comparison,
            c.pass
        )?;
    }
    Ok(w.flush()?)
}

fn list_outputs(out_dir: &Path) -> Result<Vec<String>, ExperimentError> {
    let mut names: Vec<String> = std::fs::read_dir(out_dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|name| name != "summary.json")
        .collect();
    names.sort();
    Ok(names)
}

// ---------------------------------------------------------------------------
// Experiment kinds
// ---------------------------------------------------------------------------

fn run_oracle_validation(
    config: &ExperimentConfig,
    bundle: &ModelBundle,
    out_dir: &Path,
) -> Result<Vec<CheckResult>, ExperimentError> {
    let model = bundle.model();
    let law = bundle.law();
    let horizon = config.experiment.horizon;
    let replicas = config.replicas(100_000) as u64;
    let seed = config.experiment.seed;
    let mut checks = Vec::new();

    let n_list = if config.experiment.n_list.is_empty() {
        vec![4]
    } else {
        config.experiment.n_list.clone()
    };
    for &n in n_list.iter().filter(|&&n| n <= 4) {
        let q = build_generator(model, n).map_err(|e| ExperimentError::Module(e.to_string()))?;
        let p0 = Distribution::product_initial(law, n);
        let pt = evolve(&q, &p0, horizon).map_err(|e| ExperimentError::Module(e.to_string()))?;
        let mut cache = ReplicaCache::load(
            out_dir.join(format!("replicas_n{n}.csv")),
            &["final_state"],
        )?;
        cache.ensure(replicas, |r| {
            let mut rng = replica_rng(seed, r);
            let init = sample_initial_with_rng(law, n, &mut rng);
            let traj = simulate_with_rng(model, &init, horizon, &mut rng, None);
            let config = traj.final_configuration();
            let packed = config
                .states
                .iter()
                .enumerate()
                .fold(0usize, |acc, (i, s)| acc | ((*s as usize) << (2 * i)));
            vec![packed as f64]
        })?;
        let dim = 1usize << (2 * n);
        let mut counts = vec![0u64; dim];
        for v in cache.column(replicas, 0) {
            counts[v as usize] += 1;
        }
        let tv = 0.5
            * counts
                .iter()
                .zip(&pt.p)
                .map(|(c, p)| (*c as f64 / replicas as f64 - p).abs())
                .sum::<f64>();
        checks.push(CheckResult::le(
            format!("tv_distance_n{n}"),
            tv,
            config.threshold("tv_distance", 0.01),
        ));
    }

    // Moment-ODE consistency at N = 6 with central differences of width 1e-3.
    let n_mom = 6.min(*n_list.last().unwrap_or(&6)).max(2);
    let q = build_generator(model, n_mom).map_err(|e| ExperimentError::Module(e.to_string()))?;
    let p0 = Distribution::product_initial(law, n_mom);
    let t = horizon / 2.0;
    let dt = 1e-3;
    let times = [t - dt, t, t + dt];
    let path: Vec<Distribution> = times
        .iter()
        .map(|&s| evolve(&q, &p0, s).map_err(|e| ExperimentError::Module(e.to_string())))
        .collect::<Result<_, _>>()?;
    let report = exact_moments(n_mom, &path, &times);
    let rhs = moment_ode_rhs(model, &report, 1);
    let mut worst = 0.0f64;
    for i in 0..n_mom {
        for (slot, k) in [(0usize, 0usize), (1, 1), (2, 2)] {
            let deriv = (report.means[2][k][i] - report.means[0][k][i]) / (2.0 * dt);
            worst = worst.max((deriv - rhs[i][slot]).abs());
        }
    }
    checks.push(CheckResult::le(
        format!("moment_ode_max_dev_n{n_mom}"),
        worst,
        config.threshold("moment_ode", 1e-4),
    ));

    // Correlation decay between N = 4 and N = 8 at t = horizon.
    let max_cov = |n: usize| -> Result<f64, ExperimentError> {
        let q = build_generator(model, n).map_err(|e| ExperimentError::Module(e.to_string()))?;
        let p0 = Distribution::product_initial(law, n);
        let pt = evolve(&q, &p0, horizon).map_err(|e| ExperimentError::Module(e.to_string()))?;
        let report = exact_moments(n, &[pt], &[horizon]);
        Ok(report.max_abs_covariance(0))
    };
    let c4 = max_cov(4)?;
    let c8 = max_cov(8)?;
    checks.push(CheckResult::le(
        "covariance_ratio_n8_over_n4",
        c8 / c4,
        config.threshold("covariance_ratio", 0.75),
    ));
    Ok(checks)
}

fn run_hydro_convergence(
    config: &ExperimentConfig,
    bundle: &ModelBundle,
    out_dir: &Path,
) -> Result<Vec<CheckResult>, ExperimentError> {
    let model = bundle.model();
    let law = bundle.law();
    let horizon = config.experiment.horizon;
    let replicas = config.replicas(200) as u64;
    let seed = config.experiment.seed;
    let n_list = if config.experiment.n_list.is_empty() {
        vec![250, 1000, 4000]
    } else {
        config.experiment.n_list.clone()
    };
    let settings = SolverSettings {
        steps: config.steps(),
        verify_halving: false,
        tolerance: 1e-8,
    };
    let hydro = solve_hydrodynamic(model, law, horizon, &settings)
        .map_err(|e| ExperimentError::Module(e.to_string()))?;
    let m = bundle.grid_size();
    let f = TorusFunction::from_fn(m, |u| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * u).cos());
    let sample_times: Vec<f64> = (0..=100).map(|j| horizon * j as f64 / 100.0).collect();
    let limits: Vec<[f64; 3]> = sample_times
        .iter()
        .map(|&t| std::array::from_fn(|k| hydro.path.density_at(t, k).inner(&f).unwrap()))
        .collect();

    let mut medians = Vec::new();
    for (idx, &n) in n_list.iter().enumerate() {
        let mut cache =
            ReplicaCache::load(out_dir.join(format!("replicas_n{n}.csv")), &["sup_error"])?;
        let stream_base = (idx as u64) << 32;
        cache.ensure(replicas, |r| {
            let mut rng = replica_rng(seed, stream_base | r);
            let init = sample_initial_with_rng(law, n, &mut rng);
            let traj = simulate_with_rng(model, &init, horizon, &mut rng, None);
            let path = empirical_pairings(&traj, std::slice::from_ref(&f), &sample_times)
                .expect("sample grid is valid");
            let mut sup = 0.0f64;
            for (ti, limit) in limits.iter().enumerate() {
                for k in 0..3 {
                    sup = sup.max((path.pairings[0][k][ti] - limit[k]).abs());
                }
            }
            vec![sup]
        })?;
        let mut values = cache.column(replicas, 0);
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = values[values.len() / 2];
        medians.push(median);
    }
    let xs: Vec<f64> = n_list.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = medians.iter().map(|m| m.ln()).collect();
    let (slope, intercept, stderr) = fit_rate(&xs, &ys)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(out_dir.join("medians.csv"))?);
    writeln!(w, "n,median_sup_error")?;
    for (n, median) in n_list.iter().zip(&medians) {
        writeln!(w, "{n},{}", io::fmt_f64(*median))?;
    }
    w.flush()?;
    io::write_json(
        &out_dir.join("fit.json"),
        &serde_json::json!({"slope": slope, "intercept": intercept, "stderr": stderr}),
    )?;
    let tol = config.threshold("slope_tol", 0.15);
    Ok(vec![CheckResult::abs_le(
        "concentration_slope_minus_half",
        slope + 0.5,
        tol,
    )])
}

fn run_tilted_lln(
    config: &ExperimentConfig,
    bundle: &ModelBundle,
    out_dir: &Path,
) -> Result<Vec<CheckResult>, ExperimentError> {
    let model = bundle.model();
    let law = bundle.law();
    let horizon = config.experiment.horizon;
    let n = *config.experiment.n_list.last().unwrap_or(&2000);
    let replicas = config.replicas(1) as u64;
    let m = bundle.grid_size();
    let steps = config.steps();
    // A fixed smooth nonzero tilt derived from the seed.
    let mut rng = replica_rng(config.experiment.seed, u64::MAX);
    let control = random_smooth_control(&mut rng, horizon, steps, m, 0.3);
    let f_init = [
        law.rho0.values().to_vec(),
        law.rho1.values().to_vec(),
        law.rho2.values().to_vec(),
    ];
    let settings = SolverSettings {
        steps,
        verify_halving: false,
        tolerance: 1e-8,
    };
    let tilted = solve_tilted(model, &f_init, &control, horizon, &settings)
        .map_err(|e| ExperimentError::Module(e.to_string()))?;
    let tests = standard_tests(m);
    let sample_times: Vec<f64> = (0..=50).map(|j| horizon * j as f64 / 50.0).collect();
    let limit: Vec<Vec<[f64; 3]>> = tests
        .iter()
        .map(|f| {
            sample_times
                .iter()
                .map(|&t| std::array::from_fn(|k| tilted.path.density_at(t, k).inner(f).unwrap()))
                .collect()
        })
        .collect();

    let seed = config.experiment.seed;
    let sup_by_replica: Vec<f64> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(seed, r);
            let init = sample_initial_with_rng(law, n, &mut rng);
            let traj = simulate_with_rng(model, &init, horizon, &mut rng, Some(&control));
            let path = empirical_pairings(&traj, &tests, &sample_times).expect("valid grid");
            let mut sup = 0.0f64;
            for (fi, per_test) in limit.iter().enumerate() {
                for (ti, lim) in per_test.iter().enumerate() {
                    for k in 0..3 {
                        sup = sup.max((path.pairings[fi][k][ti] - lim[k]).abs());
                    }
                }
            }
            sup
        })
        .collect();
    let mut w = std::io::BufWriter::new(std::fs::File::create(out_dir.join("sup_errors.csv"))?);
    writeln!(w, "replica,sup_error")?;
    for (r, sup) in sup_by_replica.iter().enumerate() {
        writeln!(w, "{r},{}", io::fmt_f64(*sup))?;
    }
    w.flush()?;
    let worst = sup_by_replica.iter().copied().fold(0.0f64, f64::max);
    Ok(vec![CheckResult::le(
        format!("tilted_lln_sup_n{n}"),
        worst,
        config.threshold("tilted_lln_sup", 0.05),
    )])
}

fn run_tilting_identity(
    config: &ExperimentConfig,
    bundle: &ModelBundle,
    out_dir: &Path,
) -> Result<Vec<CheckResult>, ExperimentError> {
    let model = bundle.model();
    let law = bundle.law();
    let horizon = config.experiment.horizon;
    let n = *config.experiment.n_list.last().unwrap_or(&30);
    let replicas = config.replicas(2000);
    let m = bundle.grid_size();
    // Small smooth controls: keep N * ||controls|| within the variance
    // guideline.
    let amplitude = (10.0 / n as f64).min(0.3) / 3.0;
    let mut rng = replica_rng(config.experiment.seed, u64::MAX);
    let control = random_smooth_control(&mut rng, horizon, 50, m, amplitude);
    let estimate = tilting_identity_estimate(
        model,
        law,
        n,
        horizon,
        &control,
        replicas,
        config.experiment.seed,
    );
    io::write_json(&out_dir.join("estimate.json"), &estimate)?;
    let low = config.threshold("identity_low", 0.8);
    let high = config.threshold("identity_high", 1.2);
    Ok(vec![
        CheckResult::ge(format!("identity_mean_n{n}_low"), estimate.mean, low),
        CheckResult::le(format!("identity_mean_n{n}_high"), estimate.mean, high),
        CheckResult::le("identity_ci_low_below_one", estimate.ci_low, 1.0),
        CheckResult::ge("identity_ci_high_above_one", estimate.ci_high, 1.0),
        CheckResult::le(
            "identity_ci_half_width",
            1.96 * estimate.std_error,
            0.5,
        ),
    ])
}

fn run_rate_zero(
    config: &ExperimentConfig,
    bundle: &ModelBundle,
    out_dir: &Path,
) -> Result<Vec<CheckResult>, ExperimentError> {
    let model = bundle.model();
    let law = bundle.law();
    let horizon = config.experiment.horizon;
    let settings = SolverSettings {
        steps: config.steps(),
        verify_halving: false,
        tolerance: 1e-8,
    };
    let hydro = solve_hydrodynamic(model, law, horizon, &settings)
        .map_err(|e| ExperimentError::Module(e.to_string()))?;
    let w0 = [
        law.rho0.values().to_vec(),
        law.rho1.values().to_vec(),
        law.rho2.values().to_vec(),
    ];
    let ini = i_ini_closed(&w0, law).map_err(|e| ExperimentError::Module(e.to_string()))?;
    let dyn_rate =
        i_dyn_closed(model, &hydro.path).map_err(|e| ExperimentError::Module(e.to_string()))?;
    let mut rng = replica_rng(config.experiment.seed, 0);
    let m = bundle.grid_size();
    let mut worst_i1 = f64::NEG_INFINITY;
    for _ in 0..100 {
        let control =
            random_smooth_control(&mut rng, horizon, hydro.path.num_nodes() - 1, m, 0.4);
        let report = eval_i1(model, &hydro.path, &control)
            .map_err(|e| ExperimentError::Module(e.to_string()))?;
        worst_i1 = worst_i1.max(report.i1);
    }
    io::write_json(
        &out_dir.join("rate_zero.json"),
        &serde_json::json!({
            "I_ini_at_truth": ini,
            "I_dyn_at_hydro": dyn_rate,
            "max_I1_over_random_controls": worst_i1,
        }),
    )?;
    Ok(vec![
        CheckResult::abs_le("i_ini_at_truth", ini, 0.0),
        CheckResult::le(
            "i_dyn_at_hydro",
            dyn_rate.abs(),
            config.threshold("i_dyn_zero", 1e-3),
        ),
        CheckResult::le(
            "max_i1_over_random_controls",
            worst_i1,
            config.threshold("i1_random_zero", 1e-4),
        ),
    ])
}

/// Shared machinery of the two CLT-scale experiments: hydrodynamic solve and
/// contraction denominator at the requested horizon.
fn clt_theory(
    config: &ExperimentConfig,
    bundle: &ModelBundle,
    horizon: f64,
    tests: &[TorusFunction; 3],
) -> Result<(f64, crate::hydro::DensityPath), ExperimentError> {
    let settings = SolverSettings {
        steps: config.steps(),
        verify_halving: false,
        tolerance: 1e-8,
    };
    let hydro = solve_hydrodynamic(bundle.model(), bundle.law(), horizon, &settings)
        .map_err(|e| ExperimentError::Module(e.to_string()))?;
    let prop = build_propagator(bundle.model(), &hydro.path)
        .map_err(|e| ExperimentError::Module(e.to_string()))?;
    let rate = j_contra(bundle.model(), bundle.law(), &hydro.path, &prop, tests, 1.0)
        .map_err(|e| ExperimentError::Module(e.to_string()))?;
    Ok((rate.denominator, hydro.path))
}

fn run_clt_variance(
    config: &ExperimentConfig,
    bundle: &ModelBundle,
    out_dir: &Path,
) -> Result<Vec<CheckResult>, ExperimentError> {
    let model = bundle.model();
    let law = bundle.law();
    let horizon = config.experiment.horizon;
    let n = *config.experiment.n_list.last().unwrap_or(&4000);
    let replicas = config.replicas(5000) as u64;
    let m = bundle.grid_size();
    let tests: [TorusFunction; 3] = [
        TorusFunction::constant(m, 0.0),
        TorusFunction::constant(m, 0.0),
        TorusFunction::from_fn(m, |u| 1.0 + 0.2 * (2.0 * std::f64::consts::PI * u).cos()),
    ];
    let (denominator, _) = clt_theory(config, bundle, horizon, &tests)?;

    let fv: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let u = i as f64 / n as f64;
            std::array::from_fn(|k| tests[k].eval(u))
        })
        .collect();
    let seed = config.experiment.seed;
    let mut cache = ReplicaCache::load(out_dir.join("replicas.csv"), &["pairing_sum"])?;
    cache.ensure(replicas, |r| {
        let mut rng = replica_rng(seed, r);
        let init = sample_initial_with_rng(law, n, &mut rng);
        let traj = simulate_with_rng(model, &init, horizon, &mut rng, None);
        let final_config = traj.final_configuration();
        let mut value = 0.0;
        for (i, s) in final_config.states.iter().enumerate() {
            let k = *s as usize;
            if k < 3 {
                value += fv[i][k];
            }
        }
        vec![value / n as f64]
    })?;
    let values = cache.column(replicas, 0);
    let scaled: Vec<f64> = values.iter().map(|v| (n as f64).sqrt() * v).collect();
    let mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
    let var = scaled.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
        / (scaled.len() as f64 - 1.0);
    let rel_dev = (var / denominator - 1.0).abs();
    io::write_json(
        &out_dir.join("variance.json"),
        &serde_json::json!({
            "empirical_variance": var,
            "predicted_variance": denominator,
            "relative_deviation": rel_dev,
        }),
    )?;
    Ok(vec![CheckResult::le(
        format!("clt_variance_rel_dev_n{n}"),
        rel_dev,
        config.threshold("clt_variance_rel", 0.15),
    )])
}

fn run_hitting_clt(
    config: &ExperimentConfig,
    bundle: &ModelBundle,
    out_dir: &Path,
) -> Result<Vec<CheckResult>, ExperimentError> {
    let model = bundle.model();
    let law = bundle.law();
    let horizon = config.experiment.horizon;
    let n = *config.experiment.n_list.last().unwrap_or(&4000);
    let replicas = config.replicas(5000) as u64;
    let m = bundle.grid_size();
    // Strictly increasing observable: minus the living mass. Its pairing
    // grows at rate +<phi theta_I f>, so the monotonicity hypothesis holds
    // on the whole horizon and every realization crosses interior levels.
    let shape =
        TorusFunction::from_fn(m, |u| -(1.0 + 0.2 * (2.0 * std::f64::consts::PI * u).cos()));
    let tests: [TorusFunction; 3] = [shape.clone(), shape.clone(), shape];
    let settings = SolverSettings {
        steps: config.steps(),
        verify_halving: false,
        tolerance: 1e-8,
    };
    let hydro = solve_hydrodynamic(model, law, horizon, &settings)
        .map_err(|e| ExperimentError::Module(e.to_string()))?;
    let pairings = hydro.path.sum_pairings(&tests);
    let last = *pairings.last().unwrap();
    let fraction = config.threshold("hit_level_fraction", 0.5);
    let c = pairings[0] + fraction * (last - pairings[0]);
    let hit = hitting_time_limit(&hydro.path, &tests, c)
        .map_err(|e| ExperimentError::Module(e.to_string()))?;

    // Contraction denominator at T = tau_c: re-solve on the hit horizon.
    let (denominator, _) = clt_theory(config, bundle, hit.tau, &tests)?;
    let predicted_var = denominator / (hit.derivative * hit.derivative);

    let seed = config.experiment.seed;
    let mut cache = ReplicaCache::load(out_dir.join("replicas.csv"), &["tau"])?;
    cache.ensure(replicas, |r| {
        let mut rng = replica_rng(seed, r);
        let init = sample_initial_with_rng(law, n, &mut rng);
        let traj = simulate_with_rng(model, &init, horizon, &mut rng, None);
        vec![hitting_time_empirical(&traj, &tests, c)]
    })?;
    let taus = cache.column(replicas, 0);
    let finite: Vec<f64> = taus.iter().copied().filter(|t| t.is_finite()).collect();
    let reached = finite.len() as f64 / taus.len() as f64;
    let scaled: Vec<f64> = finite
        .iter()
        .map(|t| (n as f64).sqrt() * (t - hit.tau))
        .collect();
    let mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
    let var = scaled.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
        / (scaled.len() as f64 - 1.0);
    let rel_dev = (var / predicted_var - 1.0).abs();
    let j_contra_1 = 1.0 / (2.0 * denominator);
    io::write_json(
        &out_dir.join("hitting.json"),
        &io::JReport {
            j_contra_1,
            derivative_at_tau: hit.derivative,
            j_hit_coefficient: j_contra_1 * hit.derivative * hit.derivative,
            denominator_b12_part: f64::NAN,
            denominator_b10_part: f64::NAN,
        },
    )?;
    io::write_json(
        &out_dir.join("variance.json"),
        &serde_json::json!({
            "tau_limit": hit.tau,
            "derivative": hit.derivative,
            "empirical_variance": var,
            "predicted_variance": predicted_var,
            "relative_deviation": rel_dev,
            "fraction_reached": reached,
        }),
    )?;
    Ok(vec![
        CheckResult::ge("fraction_reaching_threshold", reached, 0.999),
        CheckResult::le(
            format!("hitting_variance_rel_dev_n{n}"),
            rel_dev,
            config.threshold("hitting_variance_rel", 0.20),
        ),
    ])
}

fn run_skeleton_audit(
    config: &ExperimentConfig,
    bundle: &ModelBundle,
    out_dir: &Path,
) -> Result<Vec<CheckResult>, ExperimentError> {
    let model = bundle.model();
    let law = bundle.law();
    let horizon = config.experiment.horizon;
    let m = bundle.grid_size();
    let settings = SolverSettings {
        steps: config.steps(),
        verify_halving: false,
        tolerance: 1e-8,
    };
    let hydro = solve_hydrodynamic(model, law, horizon, &settings)
        .map_err(|e| ExperimentError::Module(e.to_string()))?;
    let prop = build_propagator(model, &hydro.path)
        .map_err(|e| ExperimentError::Module(e.to_string()))?;
    // Phi(0) identity, exactly.
    let dim = 3 * m;
    let identity_dev = (prop.initial_matrix() - nalgebra::DMatrix::<f64>::identity(dim, dim))
        .abs()
        .max();
    let tests: [TorusFunction; 3] = [
        TorusFunction::constant(m, 0.0),
        TorusFunction::constant(m, 0.0),
        TorusFunction::from_fn(m, |u| 1.0 + 0.2 * (2.0 * std::f64::consts::PI * u).cos()),
    ];
    let at = |x: f64| j_contra(model, law, &hydro.path, &prop, &tests, x);
    let one = at(1.0).map_err(|e| ExperimentError::Module(e.to_string()))?;
    let mut quad_dev = 0.0f64;
    for x in [0.5, -1.3, 2.0] {
        let jx = at(x).map_err(|e| ExperimentError::Module(e.to_string()))?;
        quad_dev = quad_dev
            .max((jx.value - x * x * one.value).abs() / (1.0 + jx.value.abs()));
    }
    let x = 0.8;
    let rate = at(x).map_err(|e| ExperimentError::Module(e.to_string()))?;
    let skel = solve_skeleton(&prop, model, &hydro.path, &rate.optimizer_tilt, &rate.optimizer_init)
        .map_err(|e| ExperimentError::Module(e.to_string()))?;
    let final_node = skel.path.num_nodes() - 1;
    let pairing: f64 = (0..3)
        .map(|k| skel.path.pairing(final_node, k, &tests[k]))
        .sum();
    io::write_json(
        &out_dir.join("audit.json"),
        &serde_json::json!({
            "j_contra_1": one.value,
            "denominator_B12_part": one.b12_part,
            "denominator_B10_part": one.b10_part,
            "quadratic_identity_dev": quad_dev,
            "duhamel_discrepancy": skel.duhamel_discrepancy,
            "constraint_pairing": pairing,
            "propagator_condition": prop.condition,
        }),
    )?;
    Ok(vec![
        CheckResult::le("phi0_identity_dev", identity_dev, 0.0),
        CheckResult::le(
            "j_contra_quadratic_dev",
            quad_dev,
            config.threshold("jcontra_quadratic", 1e-12),
        ),
        CheckResult::le(
            "skeleton_duhamel_discrepancy",
            skel.duhamel_discrepancy,
            config.threshold("duhamel", 1e-5),
        ),
        CheckResult::abs_le("optimizer_constraint_dev", pairing - x, 1e-5),
    ])
}
