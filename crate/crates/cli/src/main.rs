//! Command-line front end: single simulations, oracle solves, density-path
//! solves, rate-function reports, hitting-time studies and batch
//! experiments.
//!
//! Worker count is controlled by the `SEIRLAB_WORKERS` environment variable;
//! results are independent of it.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use seirlab_core::experiment::{load_summary, run_experiment, ExperimentConfig};
use seirlab_core::hydro::{hitting_time_limit, solve_hydrodynamic, solve_tilted, SolverSettings};
use seirlab_core::io;
use seirlab_core::ldp::{i_ini_closed, optimal_controls};
use seirlab_core::mdp::{build_propagator, hitting_time_empirical, j_contra, j_hit};
use seirlab_core::model::{ControlPath, ModelBundle, TorusFunction};
use seirlab_core::oracle::{build_generator, evolve, exact_moments, Distribution};
use seirlab_core::ssa::{replica_rng, sample_initial_with_rng, simulate_with_rng};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "seirlab", version, about = "Stochastic SEIR deviation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArg {
    /// Model definition file (TOML).
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args, Clone)]
struct TiltArg {
    /// Builtin expression for the F component of an exponential tilt.
    #[arg(long)]
    tilt_f: Option<String>,
    /// Builtin expression for the G component.
    #[arg(long)]
    tilt_g: Option<String>,
    /// Builtin expression for the H component.
    #[arg(long)]
    tilt_h: Option<String>,
    /// Time nodes of the tilt grid.
    #[arg(long, default_value_t = 100)]
    tilt_steps: usize,
}

impl TiltArg {
    fn build(&self, horizon: f64, m: usize) -> Result<Option<ControlPath>> {
        if self.tilt_f.is_none() && self.tilt_g.is_none() && self.tilt_h.is_none() {
            return Ok(None);
        }
        let build = |spec: &Option<String>| -> Result<TorusFunction> {
            match spec {
                None => Ok(TorusFunction::constant(m, 0.0)),
                Some(text) => Ok(io::FieldSpec::Expression(text.clone())
                    .build(m)
                    .context("tilt expression")?),
            }
        };
        let f = build(&self.tilt_f)?;
        let g = build(&self.tilt_g)?;
        let h = build(&self.tilt_h)?;
        let nodes = self.tilt_steps;
        let path = ControlPath::new(
            horizon,
            vec![f; nodes + 1],
            vec![g; nodes + 1],
            vec![h; nodes + 1],
        )
        .context("tilt grid")?;
        Ok(Some(path))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one exact trajectory and dump it with a manifest.
    Simulate {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        horizon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        tilt: TiltArg,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// File stem of the dump.
        #[arg(long, default_value = "trajectory")]
        stem: String,
        /// Also write `pairings.csv` for the standard test functions on a
        /// uniform sample grid.
        #[arg(long)]
        pairings: bool,
    },
    /// Solve the exact small-N chain and write the moment report.
    Oracle {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        horizon: f64,
        /// Comma-separated sample times (defaults to 11 uniform nodes).
        #[arg(long)]
        times: Option<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Solve the hydrodynamic (or tilted) density system.
    Hydro {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        horizon: f64,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[command(flatten)]
        tilt: TiltArg,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value = "density")]
        stem: String,
    },
    /// Closed-form rate functions of a solved density path.
    RatesLdp {
        #[command(flatten)]
        model: ModelArg,
        /// Directory holding the density path (as written by `hydro`).
        #[arg(long)]
        path_dir: PathBuf,
        #[arg(long, default_value = "density")]
        stem: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Contraction/hitting rate coefficients along the hydrodynamic path.
    RatesMdp {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        horizon: f64,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        /// Hitting level for the J_hit coefficient (pairs the infected
        /// density against 1).
        #[arg(long)]
        level: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Empirical and limit hitting times of the infected-mass observable.
    Hit {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        horizon: f64,
        #[arg(long)]
        level: f64,
        #[arg(long, default_value_t = 100)]
        replicas: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Batch experiments.
    Experiment {
        #[command(subcommand)]
        action: ExperimentAction,
    },
}

#[derive(Subcommand)]
enum ExperimentAction {
    /// Run an experiment configuration file.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config's `output` entry).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the summary of a finished run.
    Report { dir: PathBuf },
}

fn load_model(arg: &ModelArg) -> Result<ModelBundle> {
    io::read_model_file(&arg.model).with_context(|| format!("loading {:?}", arg.model))
}

fn infected_tests(m: usize) -> [TorusFunction; 3] {
    [
        TorusFunction::constant(m, 0.0),
        TorusFunction::constant(m, 0.0),
        TorusFunction::constant(m, 1.0),
    ]
}

fn main() -> Result<()> {
    if let Ok(workers) = std::env::var("SEIRLAB_WORKERS") {
        let count: usize = workers.parse().context("SEIRLAB_WORKERS must be an integer")?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(count)
            .build_global()
            .ok();
    }
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate {
            model,
            n,
            horizon,
            seed,
            tilt,
            out,
            stem,
            pairings,
        } => {
            let bundle = load_model(&model)?;
            let control = tilt.build(horizon, bundle.grid_size())?;
            let mut rng = replica_rng(seed, 0);
            let init = sample_initial_with_rng(bundle.law(), n, &mut rng);
            let traj =
                simulate_with_rng(bundle.model(), &init, horizon, &mut rng, control.as_ref());
            let manifest = io::TrajectoryManifest {
                n,
                horizon,
                seed,
                model_hash: io::content_hash(bundle.model()),
                tilt_hash: control.as_ref().map(io::content_hash),
            };
            io::write_trajectory(&out, &stem, &traj, &manifest)?;
            if pairings {
                let m = bundle.grid_size();
                use std::f64::consts::PI;
                let tests = vec![
                    TorusFunction::constant(m, 1.0),
                    TorusFunction::from_fn(m, |u| (2.0 * PI * u).cos()),
                    TorusFunction::from_fn(m, |u| (2.0 * PI * u).sin()),
                ];
                let times: Vec<f64> = (0..=100).map(|j| horizon * j as f64 / 100.0).collect();
                let path = seirlab_core::fields::empirical_pairings(&traj, &tests, &times)
                    .map_err(|e| anyhow::anyhow!("{e}"))?;
                io::write_pairings(&out.join("pairings.csv"), &path.times, &path.pairings)?;
            }
            println!(
                "wrote {} events to {}/{stem}.csv",
                traj.events.len(),
                out.display()
            );
        }
        Command::Oracle {
            model,
            n,
            horizon,
            times,
            out,
        } => {
            let bundle = load_model(&model)?;
            let sample_times: Vec<f64> = match times {
                Some(text) => text
                    .split(',')
                    .map(|t| t.trim().parse::<f64>().context("bad time"))
                    .collect::<Result<_>>()?,
                None => (0..=10).map(|j| horizon * j as f64 / 10.0).collect(),
            };
            let q = build_generator(bundle.model(), n)?;
            let p0 = Distribution::product_initial(bundle.law(), n);
            let path: Vec<Distribution> = sample_times
                .iter()
                .map(|&t| evolve(&q, &p0, t))
                .collect::<Result<_, _>>()?;
            let report = exact_moments(n, &path, &sample_times);
            std::fs::create_dir_all(&out)?;
            let file = out.join("moments.csv");
            io::write_moment_report(&file, &report)?;
            println!("wrote {}", file.display());
        }
        Command::Hydro {
            model,
            horizon,
            steps,
            tilt,
            out,
            stem,
        } => {
            let bundle = load_model(&model)?;
            let settings = SolverSettings {
                steps,
                verify_halving: true,
                tolerance: 1e-6,
            };
            let control = tilt.build(horizon, bundle.grid_size())?;
            let solution = match &control {
                None => solve_hydrodynamic(bundle.model(), bundle.law(), horizon, &settings)?,
                Some(c) => {
                    let f_init = [
                        bundle.law().rho0.values().to_vec(),
                        bundle.law().rho1.values().to_vec(),
                        bundle.law().rho2.values().to_vec(),
                    ];
                    solve_tilted(bundle.model(), &f_init, c, horizon, &settings)?
                }
            };
            io::write_density_path(
                &out,
                &stem,
                &solution.path,
                &io::content_hash(bundle.model()),
            )?;
            println!(
                "wrote {}/{stem}.csv (halving error {:?}, integral residual {:?})",
                out.display(),
                solution.halving_error,
                solution.integral_residual
            );
        }
        Command::RatesLdp {
            model,
            path_dir,
            stem,
            out,
        } => {
            let bundle = load_model(&model)?;
            let path = io::read_density_path(&path_dir, &stem)?;
            let report = seirlab_core::hydro::is_admissible_d0(&path);
            if !report.admissible {
                bail!("density path is not admissible: {report:?}");
            }
            let w0 = [
                path.w[0][0].clone(),
                path.w[0][1].clone(),
                path.w[0][2].clone(),
            ];
            let i_ini = i_ini_closed(&w0, bundle.law())?;
            let controls = optimal_controls(bundle.model(), &path)?;
            let at_optimum = seirlab_core::ldp::eval_i1(bundle.model(), &path, &controls)?;
            let i_dyn = at_optimum.i1;
            std::fs::create_dir_all(&out)?;
            io::write_json(
                &out.join("rates_ldp.json"),
                &io::ClosedFormReport {
                    i_ini,
                    i_dyn,
                    chain_margin: report.chain_margin,
                    derivative_margin: report.derivative_margin,
                },
            )?;
            io::write_ldp_report(&out.join("i1_report.json"), &at_optimum)?;
            io::write_ldp_traces(&out.join("rates_ldp_traces.csv"), &at_optimum)?;
            println!(
                "I_ini = {i_ini:.6e}, I_dyn = {i_dyn:.6e}, optimal control sup = {:.3e}",
                controls.sup()
            );
        }
        Command::RatesMdp {
            model,
            horizon,
            steps,
            level,
            out,
        } => {
            let bundle = load_model(&model)?;
            let settings = SolverSettings {
                steps,
                verify_halving: false,
                tolerance: 1e-8,
            };
            let hydro = solve_hydrodynamic(bundle.model(), bundle.law(), horizon, &settings)?;
            let tests = infected_tests(bundle.grid_size());
            let (tau, derivative) = match level {
                Some(c) => {
                    let hit = hitting_time_limit(&hydro.path, &tests, c)?;
                    (hit.tau, hit.derivative)
                }
                None => (horizon, f64::NAN),
            };
            let theta = if (tau - horizon).abs() > 1e-12 {
                solve_hydrodynamic(bundle.model(), bundle.law(), tau, &settings)?.path
            } else {
                hydro.path
            };
            let prop = build_propagator(bundle.model(), &theta)?;
            let rate = j_contra(bundle.model(), bundle.law(), &theta, &prop, &tests, 1.0)?;
            let j_hit_coefficient = if derivative.is_finite() {
                j_hit(1.0, rate.value, derivative)?
            } else {
                f64::NAN
            };
            std::fs::create_dir_all(&out)?;
            io::write_json(
                &out.join("rates_mdp.json"),
                &io::JReport {
                    j_contra_1: rate.value,
                    derivative_at_tau: derivative,
                    j_hit_coefficient,
                    denominator_b12_part: rate.b12_part,
                    denominator_b10_part: rate.b10_part,
                },
            )?;
            io::write_propagator_checkpoints(&out.join("propagator.bin"), &prop)?;
            println!(
                "J_contra(1) = {:.6e} (B12 {:.6e} + B10 {:.6e}), condition {:.3e}",
                rate.value, rate.b12_part, rate.b10_part, prop.condition
            );
        }
        Command::Hit {
            model,
            n,
            horizon,
            level,
            replicas,
            seed,
            out,
        } => {
            let bundle = load_model(&model)?;
            let settings = SolverSettings {
                steps: 2000,
                verify_halving: false,
                tolerance: 1e-8,
            };
            let hydro = solve_hydrodynamic(bundle.model(), bundle.law(), horizon, &settings)?;
            let tests = infected_tests(bundle.grid_size());
            let limit = hitting_time_limit(&hydro.path, &tests, level)?;
            std::fs::create_dir_all(&out)?;
            let mut w = std::fs::File::create(out.join("hitting_times.csv"))?;
            use std::io::Write;
            writeln!(w, "replica,tau")?;
            for r in 0..replicas {
                let mut rng = replica_rng(seed, r);
                let init = sample_initial_with_rng(bundle.law(), n, &mut rng);
                let traj =
                    simulate_with_rng(bundle.model(), &init, horizon, &mut rng, None);
                let tau = hitting_time_empirical(&traj, &tests, level);
                writeln!(w, "{r},{}", io::fmt_f64(tau))?;
            }
            println!(
                "tau_limit = {:.6} (slope {:.6}); wrote {} replicas",
                limit.tau, limit.derivative, replicas
            );
        }
        Command::Experiment { action } => match action {
            ExperimentAction::Run { config, out, seed } => {
                let text = std::fs::read_to_string(&config)
                    .with_context(|| format!("reading {config:?}"))?;
                let mut parsed = ExperimentConfig::from_toml(&text)?;
                if let Some(seed) = seed {
                    parsed.experiment.seed = seed;
                }
                let out_dir = out
                    .or_else(|| parsed.experiment.output.clone().map(PathBuf::from))
                    .unwrap_or_else(|| PathBuf::from("runs").join(parsed.experiment.kind.name()));
                let summary = run_experiment(&parsed, &out_dir)?;
                for check in &summary.checks {
                    println!(
                        "[{}] {} = {:.6e} ({} {:.6e})",
                        if check.pass { "PASS" } else { "FAIL" },
                        check.name,
                        check.value,
                        check.comparison,
                        check.threshold
                    );
                }
                println!(
                    "{}: {} in {:.1}s -> {}",
                    summary.manifest.kind,
                    if summary.pass { "PASS" } else { "FAIL" },
                    summary.manifest.wall_clock_seconds,
                    out_dir.display()
                );
                if !summary.pass {
                    std::process::exit(1);
                }
            }
            ExperimentAction::Report { dir } => {
                let summary = load_summary(&dir)?;
                println!("{}", serde_json::to_string_pretty(&summary)?);
                if !summary.pass {
                    std::process::exit(1);
                }
            }
        },
    }
    Ok(())
}
