//! Large-deviation functionals of the empirical density fields.
//!
//! The dynamic functional is evaluated as `I1 = l1 - B1 - B2 - B3`, where
//! `l1` collects the endpoint and time-derivative pairings of the path
//! against the control triple `(F, G, H)` and the `B`-terms integrate the
//! tilted jump intensities:
//!
//! * `B1` pairs `W_1 (x) W_3` against `lambda(u,v) (e^{-F(u)+G(u)} - 1)`,
//! * `B2` pairs `W_2` against `psi (e^{-G+H} - 1)`,
//! * `B3` pairs `W_3` against `phi (e^{-H} - 1)`.
//!
//! On admissible paths the supremum over controls is attained at the closed
//! form `(F_W, G_W, H_W)` built from log-ratios of the path's drift to its
//! jump intensities, giving the dynamic rate directly; the initial rate has
//! the explicit relative-entropy form.

use crate::hydro::{is_admissible_d0, DensityPath};
use crate::model::{ControlPath, InitialLaw, Kernel, RateModel, TorusFunction};
use crate::ssa::{replica_rng, sample_initial_with_rng, simulate_with_rng, State, Trajectory};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hard floor for every logarithm in rate-function evaluation. Values at or
/// below the floor are domain errors, never clamped: near-boundary rate
/// values are meaningful infinities.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LdpError {
    #[error("path and control grids differ: {0}")]
    GridMismatch(String),
    #[error("logarithm argument {value:e} at node {node} below the {floor:e} floor")]
    LogDomain { node: usize, value: f64, floor: f64 },
    #[error("density outside the admissible domain at node {node}: {reason}")]
    DomainViolation { node: usize, reason: String },
    #[error("path is not admissible: {0}")]
    NotAdmissible(String),
}

/// Fully itemized evaluation of the dynamic functional.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdpReport {
    pub l1: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub i1: f64,
    /// Per-time-node integrands of the three `B`-terms, for audit.
    pub traces: Vec<BTrace>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BTrace {
    pub t: f64,
    pub integrand_b1: f64,
    pub integrand_b2: f64,
    pub integrand_b3: f64,
}

fn check_grids(path: &DensityPath, control: &ControlPath) -> Result<(), LdpError> {
    if path.num_nodes() != control.num_nodes() {
        return Err(LdpError::GridMismatch(format!(
            "{} path nodes vs {} control nodes",
            path.num_nodes(),
            control.num_nodes()
        )));
    }
    if path.m() != control.grid_size() {
        return Err(LdpError::GridMismatch(format!(
            "spatial grid {} vs {}",
            path.m(),
            control.grid_size()
        )));
    }
    Ok(())
}

/// Time derivative of a control component at node `j` by central differences
/// (second-order one-sided at the endpoints), as grid samples.
fn control_time_derivative(control: &ControlPath, component: usize, j: usize) -> Vec<f64> {
    let n = control.num_nodes();
    let dt = control.dt();
    let m = control.grid_size();
    let at = |j: usize| control.node(component, j).values();
    (0..m)
        .map(|x| {
            if j == 0 {
                (-3.0 * at(0)[x] + 4.0 * at(1)[x] - at(2)[x]) / (2.0 * dt)
            } else if j == n - 1 {
                (3.0 * at(n - 1)[x] - 4.0 * at(n - 2)[x] + at(n - 3)[x]) / (2.0 * dt)
            } else {
                (at(j + 1)[x] - at(j - 1)[x]) / (2.0 * dt)
            }
        })
        .collect()
}

/// The linear pairing `l1(W, F, G, H)`: endpoint pairings minus the time
/// integral of the path against the control's time derivative.
pub fn eval_l1(path: &DensityPath, control: &ControlPath) -> Result<f64, LdpError> {
    check_grids(path, control)?;
    let m = path.m();
    let nt = path.num_nodes();
    let dt = path.dt();
    let quad = 1.0 / m as f64;
    let mut l1 = 0.0;
    for k in 0..3 {
        let last = nt - 1;
        l1 += path.w[last][k]
            .iter()
            .zip(control.node(k, last).values())
            .map(|(w, x)| w * x)
            .sum::<f64>()
            * quad;
        l1 -= path.w[0][k]
            .iter()
            .zip(control.node(k, 0).values())
            .map(|(w, x)| w * x)
            .sum::<f64>()
            * quad;
    }
    let mut integral = 0.0;
    let mut prev = 0.0;
    for j in 0..nt {
        let mut node = 0.0;
        for comp in 0..3 {
            let dx = control_time_derivative(control, comp, j);
            node += path.w[j][comp]
                .iter()
                .zip(&dx)
                .map(|(w, d)| w * d)
                .sum::<f64>()
                * quad;
        }
        if j > 0 {
            integral += dt / 2.0 * (prev + node);
        }
        prev = node;
    }
    Ok(l1 - integral)
}

/// Evaluates `I1(W, F, G, H)` on a grid density path, with the endpoint and
/// derivative pairings by quadrature and all time integrals by the trapezoid
/// rule on the shared grid.
pub fn eval_i1(
    model: &RateModel,
    path: &DensityPath,
    control: &ControlPath,
) -> Result<LdpReport, LdpError> {
    check_grids(path, control)?;
    let m = path.m();
    let nt = path.num_nodes();
    let dt = path.dt();
    let quad = 1.0 / m as f64;
    let psi: Vec<f64> = (0..m).map(|x| model.psi.eval(x as f64 / m as f64)).collect();
    let phi: Vec<f64> = (0..m).map(|x| model.phi.eval(x as f64 / m as f64)).collect();

    // Endpoint pairings of l1.
    let mut l1 = 0.0;
    for k in 0..3 {
        let last = nt - 1;
        l1 += path.w[last][k]
            .iter()
            .zip(control.node(k, last).values())
            .map(|(w, x)| w * x)
            .sum::<f64>()
            * quad;
        l1 -= path.w[0][k]
            .iter()
            .zip(control.node(k, 0).values())
            .map(|(w, x)| w * x)
            .sum::<f64>()
            * quad;
    }

    let mut derivative_integral = 0.0;
    let mut b = [0.0f64; 3];
    let mut traces = Vec::with_capacity(nt);
    let mut prev: Option<(f64, [f64; 3])> = None;
    for j in 0..nt {
        let slice = &path.w[j];
        let mut deriv_term = 0.0;
        for comp in 0..3 {
            let dx = control_time_derivative(control, comp, j);
            deriv_term += slice[comp]
                .iter()
                .zip(&dx)
                .map(|(w, d)| w * d)
                .sum::<f64>()
                * quad;
        }

        let f = control.node(0, j).values();
        let g = control.node(1, j).values();
        let h = control.node(2, j).values();
        // B1 integrand: W_1 (x) W_3 against lambda(u,v)(e^{-F(u)+G(u)} - 1).
        let b1_node = match &model.lambda {
            Kernel::Product { lambda1, lambda2 } => {
                let left: f64 = (0..m)
                    .map(|x| slice[0][x] * lambda1.values()[x] * ((-f[x] + g[x]).exp() - 1.0))
                    .sum::<f64>()
                    * quad;
                let right: f64 = (0..m)
                    .map(|x| slice[2][x] * lambda2.values()[x])
                    .sum::<f64>()
                    * quad;
                left * right
            }
            Kernel::Samples { values } => {
                let mut acc = 0.0;
                for x in 0..m {
                    let tilt = (-f[x] + g[x]).exp() - 1.0;
                    let mut inner = 0.0;
                    for y in 0..m {
                        inner += values[x][y] * slice[2][y];
                    }
                    acc += slice[0][x] * tilt * inner;
                }
                acc * quad * quad
            }
        };
        let b2_node: f64 = (0..m)
            .map(|x| slice[1][x] * psi[x] * ((-g[x] + h[x]).exp() - 1.0))
            .sum::<f64>()
            * quad;
        let b3_node: f64 = (0..m)
            .map(|x| slice[2][x] * phi[x] * ((-h[x]).exp() - 1.0))
            .sum::<f64>()
            * quad;
        traces.push(BTrace {
            t: path.times[j],
            integrand_b1: b1_node,
            integrand_b2: b2_node,
            integrand_b3: b3_node,
        });
        if let Some((pd, pb)) = prev {
            derivative_integral += dt / 2.0 * (pd + deriv_term);
            b[0] += dt / 2.0 * (pb[0] + b1_node);
            b[1] += dt / 2.0 * (pb[1] + b2_node);
            b[2] += dt / 2.0 * (pb[2] + b3_node);
        }
        prev = Some((deriv_term, [b1_node, b2_node, b3_node]));
    }
    l1 -= derivative_integral;
    Ok(LdpReport {
        l1,
        b1: b[0],
        b2: b[1],
        b3: b[2],
        i1: l1 - b[0] - b[1] - b[2],
        traces,
    })
}

/// `I2(pi, f1, f2, f3) = sum_k <pi_k, f_k>
/// - int log(1 + sum_k rho_{k-1}(u)(e^{f_k(u)} - 1)) du`.
pub fn eval_i2(
    law: &InitialLaw,
    pi: &[Vec<f64>; 3],
    tests: &[TorusFunction; 3],
) -> Result<f64, LdpError> {
    let m = law.grid_size();
    if pi.iter().any(|p| p.len() != m) || tests.iter().any(|t| t.grid_size() != m) {
        return Err(LdpError::GridMismatch("eval_i2 operands".into()));
    }
    let quad = 1.0 / m as f64;
    let mut linear = 0.0;
    let mut log_term = 0.0;
    let rho = [&law.rho0, &law.rho1, &law.rho2];
    for x in 0..m {
        let mut arg = 1.0;
        for k in 0..3 {
            let f = tests[k].values()[x];
            linear += pi[k][x] * f;
            arg += rho[k].values()[x] * (f.exp() - 1.0);
        }
        if arg <= LOG_FLOOR {
            return Err(LdpError::LogDomain {
                node: x,
                value: arg,
                floor: LOG_FLOOR,
            });
        }
        log_term += arg.ln();
    }
    Ok(linear * quad - log_term * quad)
}

/// Closed-form initial rate on strictly interior densities:
/// `int [ sum_k w_k log(w_k / rho_{k-1})
/// - (1 - sum_k w_k) log((1 - sum rho) / (1 - sum w)) ] du`.
pub fn i_ini_closed(w0: &[Vec<f64>; 3], law: &InitialLaw) -> Result<f64, LdpError> {
    let m = law.grid_size();
    if w0.iter().any(|w| w.len() != m) {
        return Err(LdpError::GridMismatch("initial densities".into()));
    }
    let rho = [&law.rho0, &law.rho1, &law.rho2];
    let mut acc = 0.0;
    for x in 0..m {
        let sum_w: f64 = (0..3).map(|k| w0[k][x]).sum();
        let sum_rho: f64 = (0..3).map(|k| rho[k].values()[x]).sum();
        if sum_w >= 1.0 - LOG_FLOOR {
            return Err(LdpError::DomainViolation {
                node: x,
                reason: format!("density sum {sum_w} reaches 1"),
            });
        }
        let mut node = 0.0;
        for k in 0..3 {
            let w = w0[k][x];
            if w <= LOG_FLOOR {
                return Err(LdpError::DomainViolation {
                    node: x,
                    reason: format!("component {k} density {w:e} at the log floor"),
                });
            }
            node += w * (w / rho[k].values()[x]).ln();
        }
        node -= (1.0 - sum_w) * ((1.0 - sum_rho) / (1.0 - sum_w)).ln();
        acc += node;
    }
    Ok(acc / m as f64)
}

/// Closed-form optimal controls on an admissible path:
/// `H_W = -log[(-d/dt sum_3 w) / (phi w_3)]`,
/// `G_W = H_W - log[(-d/dt sum_2 w) / (psi w_2)]`,
/// `F_W = G_W - log[(-d/dt w_1) / (w_1 int lambda(u,v) w_3(v) dv)]`.
pub fn optimal_controls(model: &RateModel, path: &DensityPath) -> Result<ControlPath, LdpError> {
    let report = is_admissible_d0(path);
    if !report.admissible {
        return Err(LdpError::NotAdmissible(format!(
            "admissibility violated: {:?} (chain margin {:e}, derivative margin {:e})",
            report.violated, report.chain_margin, report.derivative_margin
        )));
    }
    // Gate the closed form on the finite-difference error: the margins must
    // dominate the derivative-estimate error by 10x or the log-ratios are
    // numerically contaminated.
    let fd_error = finite_difference_error_estimate(path);
    if report.derivative_margin <= 10.0 * fd_error {
        return Err(LdpError::NotAdmissible(format!(
            "derivative margin {:e} within 10x of the finite-difference error {:e}",
            report.derivative_margin, fd_error
        )));
    }
    let m = path.m();
    let nt = path.num_nodes();
    let psi: Vec<f64> = (0..m).map(|x| model.psi.eval(x as f64 / m as f64)).collect();
    let phi: Vec<f64> = (0..m).map(|x| model.phi.eval(x as f64 / m as f64)).collect();
    let d1 = path.time_derivative(0);
    let d2 = path.time_derivative(1);
    let d3 = path.time_derivative(2);
    let mut f_nodes = Vec::with_capacity(nt);
    let mut g_nodes = Vec::with_capacity(nt);
    let mut h_nodes = Vec::with_capacity(nt);
    for j in 0..nt {
        let slice = &path.w[j];
        let infect_field = model.lambda.apply_right(&slice[2]);
        let mut f = vec![0.0; m];
        let mut g = vec![0.0; m];
        let mut h = vec![0.0; m];
        for x in 0..m {
            // The closed form divides by each density: a vanishing component
            // is a hard domain error, not a large control.
            for k in 0..3 {
                if slice[k][x] <= LOG_FLOOR {
                    return Err(LdpError::DomainViolation {
                        node: x,
                        reason: format!(
                            "component {} density {:e} at the log floor",
                            k + 1,
                            slice[k][x]
                        ),
                    });
                }
            }
            let dsum3 = d1[j][x] + d2[j][x] + d3[j][x];
            let dsum2 = d1[j][x] + d2[j][x];
            let ratio_h = -dsum3 / (phi[x] * slice[2][x]);
            let ratio_g = -dsum2 / (psi[x] * slice[1][x]);
            let ratio_f = -d1[j][x] / (slice[0][x] * infect_field[x]);
            for r in [ratio_h, ratio_g, ratio_f] {
                if r <= LOG_FLOOR {
                    return Err(LdpError::LogDomain {
                        node: x,
                        value: r,
                        floor: LOG_FLOOR,
                    });
                }
            }
            h[x] = -ratio_h.ln();
            g[x] = h[x] - ratio_g.ln();
            f[x] = g[x] - ratio_f.ln();
        }
        f_nodes.push(TorusFunction::from_samples(f));
        g_nodes.push(TorusFunction::from_samples(g));
        h_nodes.push(TorusFunction::from_samples(h));
    }
    ControlPath::new(path.horizon(), f_nodes, g_nodes, h_nodes)
        .map_err(|e| LdpError::GridMismatch(e.to_string()))
}

/// Richardson-style bound on the central-difference error of the stored
/// path: compares the step-dt derivative against the step-2dt one.
fn finite_difference_error_estimate(path: &DensityPath) -> f64 {
    let nt = path.num_nodes();
    if nt < 5 {
        return f64::INFINITY;
    }
    let dt = path.dt();
    let m = path.m();
    let mut worst = 0.0f64;
    for k in 0..3 {
        for j in (2..nt - 2).step_by((nt / 64).max(1)) {
            for x in 0..m {
                let fine = (path.w[j + 1][k][x] - path.w[j - 1][k][x]) / (2.0 * dt);
                let coarse = (path.w[j + 2][k][x] - path.w[j - 2][k][x]) / (4.0 * dt);
                worst = worst.max((fine - coarse).abs() / 3.0);
            }
        }
    }
    worst
}

/// Dynamic rate on an admissible path: `I1` at the closed-form optimal
/// controls. Empirical (atomic) paths are rejected upstream by the
/// admissibility gate.
pub fn i_dyn_closed(model: &RateModel, path: &DensityPath) -> Result<f64, LdpError> {
    let controls = optimal_controls(model, path)?;
    Ok(eval_i1(model, path, &controls)?.i1)
}

/// `I1` evaluated exactly on one atomic empirical path. The endpoint and
/// derivative pairings reduce to a sum of control values over the event log
/// (integration by parts against the jump measure); the `B`-term time
/// integrals are piecewise-smooth between events and control nodes and are
/// integrated by Simpson's rule on that partition.
pub fn eval_i1_empirical(
    model: &RateModel,
    traj: &Trajectory,
    control: &ControlPath,
) -> LdpReport {
    let n = traj.n();
    let inv_n = 1.0 / n as f64;
    let mut l1 = 0.0;
    for e in &traj.events {
        let u = e.vertex as f64 / n as f64;
        let t = e.time;
        l1 += inv_n
            * match e.transition {
                crate::ssa::Transition::Exposure => {
                    -control.eval(0, t, u) + control.eval(1, t, u)
                }
                crate::ssa::Transition::Progression => {
                    -control.eval(1, t, u) + control.eval(2, t, u)
                }
                crate::ssa::Transition::Removal => -control.eval(2, t, u),
            };
    }

    // Merge event times with control-cell boundaries.
    let mut breaks: Vec<f64> = Vec::with_capacity(traj.events.len() + control.num_nodes());
    breaks.push(0.0);
    let mut ev = traj.events.iter().map(|e| e.time).peekable();
    for j in 1..control.num_nodes() {
        let cell = j as f64 * control.dt();
        while let Some(&t) = ev.peek() {
            if t < cell && t < traj.horizon {
                breaks.push(t);
                ev.next();
            } else {
                break;
            }
        }
        if cell < traj.horizon {
            breaks.push(cell);
        }
    }
    for t in ev {
        if t < traj.horizon {
            breaks.push(t);
        }
    }
    breaks.push(traj.horizon);
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-15);

    let positions: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    let psi: Vec<f64> = positions.iter().map(|&u| model.psi.eval(u)).collect();
    let phi: Vec<f64> = positions.iter().map(|&u| model.phi.eval(u)).collect();
    let (lam1, lam2): (Vec<f64>, Vec<f64>) = match &model.lambda {
        Kernel::Product { lambda1, lambda2 } => (
            positions.iter().map(|&u| lambda1.eval(u)).collect(),
            positions.iter().map(|&u| lambda2.eval(u)).collect(),
        ),
        Kernel::Samples { .. } => (Vec::new(), Vec::new()),
    };

    let mut states = traj.initial.states.clone();
    let mut next_event = 0usize;
    let mut b = [0.0f64; 3];
    // Integrand of the three B-terms at time s for the current configuration.
    let integrand = |states: &[State], s: f64| -> [f64; 3] {
        let mut b1 = 0.0;
        if lam1.is_empty() {
            for i in 0..n {
                if states[i] != State::Susceptible {
                    continue;
                }
                let tilt = (-control.eval(0, s, positions[i]) + control.eval(1, s, positions[i]))
                    .exp()
                    - 1.0;
                let mut pressure = 0.0;
                for j in 0..n {
                    if states[j] == State::Infected {
                        pressure += model.lambda.eval(positions[i], positions[j]);
                    }
                }
                b1 += tilt * pressure;
            }
            b1 *= inv_n * inv_n;
        } else {
            let mut left = 0.0;
            let mut right = 0.0;
            for i in 0..n {
                match states[i] {
                    State::Susceptible => {
                        let tilt = (-control.eval(0, s, positions[i])
                            + control.eval(1, s, positions[i]))
                        .exp()
                            - 1.0;
                        left += lam1[i] * tilt;
                    }
                    State::Infected => right += lam2[i],
                    _ => {}
                }
            }
            b1 = left * right * inv_n * inv_n;
        }
        let mut b2 = 0.0;
        let mut b3 = 0.0;
        for i in 0..n {
            match states[i] {
                State::Exposed => {
                    b2 += psi[i]
                        * ((-control.eval(1, s, positions[i]) + control.eval(2, s, positions[i]))
                            .exp()
                            - 1.0);
                }
                State::Infected => {
                    b3 += phi[i] * ((-control.eval(2, s, positions[i])).exp() - 1.0);
                }
                _ => {}
            }
        }
        [b1, b2 * inv_n, b3 * inv_n]
    };

    for w in breaks.windows(2) {
        let (a, c) = (w[0], w[1]);
        if c <= a {
            continue;
        }
        // Configuration on (a, c] is the one after all events at time <= a.
        while next_event < traj.events.len() && traj.events[next_event].time <= a {
            let e = &traj.events[next_event];
            states[e.vertex as usize] = e.transition.target();
            next_event += 1;
        }
        let mid = 0.5 * (a + c);
        let ga = integrand(&states, a);
        let gm = integrand(&states, mid);
        let gc = integrand(&states, c);
        for k in 0..3 {
            b[k] += (c - a) / 6.0 * (ga[k] + 4.0 * gm[k] + gc[k]);
        }
    }
    LdpReport {
        l1,
        b1: b[0],
        b2: b[1],
        b3: b[2],
        i1: l1 - b[0] - b[1] - b[2],
        traces: Vec::new(),
    }
}

/// Monte-Carlo check of the exponential-martingale identity: the sample
/// mean of `exp(N * I1(mu^N, F, G, H))` over untilted replicas, with a
/// normal confidence interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TiltingEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub replicas: usize,
    /// Set when the CI half-width exceeds 0.5: the estimate is reported but
    /// must not be accepted silently.
    pub variance_blowup: bool,
}

pub fn tilting_identity_estimate(
    model: &RateModel,
    law: &InitialLaw,
    n: usize,
    horizon: f64,
    control: &ControlPath,
    replicas: usize,
    seed: u64,
) -> TiltingEstimate {
    let samples: Vec<f64> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(seed, r);
            let init = sample_initial_with_rng(law, n, &mut rng);
            let traj = simulate_with_rng(model, &init, horizon, &mut rng, None);
            let report = eval_i1_empirical(model, &traj, control);
            (n as f64 * report.i1).exp()
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / replicas as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
        / (replicas as f64 - 1.0).max(1.0);
    let std_error = (var / replicas as f64).sqrt();
    let half = 1.96 * std_error;
    // Overflowing samples surface as non-finite moments; that is a blowup
    // too, not a pass.
    let blowup = half.is_nan() || half > 0.5 || !mean.is_finite();
    TiltingEstimate {
        mean,
        std_error,
        ci_low: mean - half,
        ci_high: mean + half,
        replicas,
        variance_blowup: blowup,
    }
}

/// Smooth random control triple with a few Fourier modes in space and time,
/// for randomized supremum/dominance sweeps.
pub fn random_smooth_control(
    rng: &mut impl rand::Rng,
    horizon: f64,
    steps: usize,
    m: usize,
    amplitude: f64,
) -> ControlPath {
    use std::f64::consts::PI;
    let mut draw = || rng.gen_range(-1.0..1.0);
    let mut coeff = || [draw(), draw(), draw(), draw(), draw()];
    let cf = coeff();
    let cg = coeff();
    let ch = coeff();
    let make = move |c: [f64; 5]| {
        move |t: f64, u: f64| {
            amplitude
                * (c[0]
                    + c[1] * (2.0 * PI * u).cos()
                    + c[2] * (2.0 * PI * u).sin()
                    + c[3] * (PI * t / horizon).sin() * (2.0 * PI * u).cos()
                    + c[4] * t / horizon)
        }
    };
    ControlPath::from_fns(horizon, steps, m, make(cf), make(cg), make(ch))
}

/// Smooth random torus function, companion to [`random_smooth_control`].
pub fn random_smooth_function(rng: &mut impl rand::Rng, m: usize, amplitude: f64) -> TorusFunction {
    use std::f64::consts::PI;
    let c: [f64; 4] = [
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    ];
    TorusFunction::from_fn(m, move |u| {
        amplitude
            * (c[0]
                + c[1] * (2.0 * PI * u).cos()
                + c[2] * (2.0 * PI * u).sin()
                + c[3] * (4.0 * PI * u).cos())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hydro::{solve_hydrodynamic, solve_tilted, SolverSettings};
    use crate::model::Kernel;
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

    fn hydro_path(m: usize, horizon: f64) -> DensityPath {
        solve_hydrodynamic(&smooth_model(m), &smooth_law(m), horizon, &SolverSettings::default())
            .unwrap()
            .path
    }

    #[test]
    fn zero_control_gives_exactly_zero() {
        let m = 24;
        let path = hydro_path(m, 1.0);
        let zero = ControlPath::zero(1.0, path.num_nodes() - 1, m);
        let report = eval_i1(&smooth_model(m), &path, &zero).unwrap();
        assert_eq!(report.l1, 0.0);
        assert_eq!(report.b1, 0.0);
        assert_eq!(report.b2, 0.0);
        assert_eq!(report.b3, 0.0);
        assert_eq!(report.i1, 0.0);
    }

    #[test]
    fn i1_on_hydrodynamic_path_is_maximized_at_zero() {
        let m = 24;
        let model = smooth_model(m);
        let path = hydro_path(m, 1.0);
        let mut rng = replica_rng(42, 0);
        for _ in 0..100 {
            let control = random_smooth_control(&mut rng, 1.0, path.num_nodes() - 1, m, 0.4);
            let report = eval_i1(&model, &path, &control).unwrap();
            assert!(
                report.i1 <= 1e-4,
                "I1 = {} must not exceed the discretization slack",
                report.i1
            );
        }
    }

    #[test]
    fn i2_zero_tests_and_scalar_case() {
        let m = 16;
        let law = InitialLaw {
            rho0: TorusFunction::constant(m, 0.25),
            rho1: TorusFunction::constant(m, 0.25),
            rho2: TorusFunction::constant(m, 0.25),
        };
        let pi = [vec![0.5; m], vec![0.2; m], vec![0.1; m]];
        let zero = [
            TorusFunction::constant(m, 0.0),
            TorusFunction::constant(m, 0.0),
            TorusFunction::constant(m, 0.0),
        ];
        assert_eq!(eval_i2(&law, &pi, &zero).unwrap(), 0.0);

        // Constant data reduce to scalar arithmetic.
        let (a, b, c) = (0.4, -0.3, 0.2);
        let tests = [
            TorusFunction::constant(m, a),
            TorusFunction::constant(m, b),
            TorusFunction::constant(m, c),
        ];
        let got = eval_i2(&law, &pi, &tests).unwrap();
        let want = 0.5 * a + 0.2 * b + 0.1 * c
            - (1.0 + 0.25 * (a.exp() - 1.0) + 0.25 * (b.exp() - 1.0) + 0.25 * (c.exp() - 1.0))
                .ln();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn i2_first_variation_vanishes_at_truth() {
        let m = 32;
        let law = smooth_law(m);
        let pi = [
            law.rho0.values().to_vec(),
            law.rho1.values().to_vec(),
            law.rho2.values().to_vec(),
        ];
        let mut rng = replica_rng(7, 0);
        let eps = 1e-4;
        for _ in 0..20 {
            let f: Vec<TorusFunction> =
                (0..3).map(|_| random_smooth_function(&mut rng, m, 1.0)).collect();
            let scaled: [TorusFunction; 3] = std::array::from_fn(|k| {
                TorusFunction::from_samples(f[k].values().iter().map(|v| eps * v).collect())
            });
            let val = eval_i2(&law, &pi, &scaled).unwrap();
            // First variation vanishes: I2(eps f) = O(eps^2).
            assert!(
                val.abs() / eps <= 1e-6 + 10.0 * eps,
                "slope {} at eps = {eps}",
                val / eps
            );
        }
    }

    #[test]
    fn i_ini_zero_at_truth_and_constant_example() {
        let m = 16;
        let law = smooth_law(m);
        let w0 = [
            law.rho0.values().to_vec(),
            law.rho1.values().to_vec(),
            law.rho2.values().to_vec(),
        ];
        assert_eq!(i_ini_closed(&w0, &law).unwrap(), 0.0);

        let law_c = InitialLaw {
            rho0: TorusFunction::constant(m, 0.25),
            rho1: TorusFunction::constant(m, 0.25),
            rho2: TorusFunction::constant(m, 0.25),
        };
        let w = [vec![0.5; m], vec![0.2; m], vec![0.1; m]];
        let got = i_ini_closed(&w, &law_c).unwrap();
        let want = 0.5 * (0.5f64 / 0.25).ln() + 0.2 * (0.2f64 / 0.25).ln()
            + 0.1 * (0.1f64 / 0.25).ln()
            - 0.2 * (0.25f64 / 0.2).ln();
        assert!((got - want).abs() < 1e-14, "got {got} want {want}");
        assert!((got - 0.1657).abs() < 5e-4);
    }

    #[test]
    fn i_ini_dominates_i2_with_equality_at_optimizer() {
        let m = 24;
        let law = smooth_law(m);
        let w0 = [vec![0.4; m], vec![0.25; m], vec![0.2; m]];
        let ini = i_ini_closed(&w0, &law).unwrap();
        let mut rng = replica_rng(11, 0);
        for _ in 0..100 {
            let tests: [TorusFunction; 3] =
                std::array::from_fn(|_| random_smooth_function(&mut rng, m, 0.8));
            let i2 = eval_i2(&law, &w0, &tests).unwrap();
            assert!(ini >= i2 - 1e-9, "I_ini {ini} < I2 {i2}");
        }
        // Optimizer: f_k = log(w_k / rho_{k-1}) - log((1 - sum w)/(1 - sum rho)).
        let rho = [&law.rho0, &law.rho1, &law.rho2];
        let opt: [TorusFunction; 3] = std::array::from_fn(|k| {
            TorusFunction::from_samples(
                (0..m)
                    .map(|x| {
                        let sum_w: f64 = (0..3).map(|l| w0[l][x]).sum();
                        let sum_rho: f64 = (0..3).map(|l| rho[l].values()[x]).sum();
                        (w0[k][x] / rho[k].values()[x]).ln()
                            - ((1.0 - sum_w) / (1.0 - sum_rho)).ln()
                    })
                    .collect(),
            )
        });
        let at_opt = eval_i2(&law, &w0, &opt).unwrap();
        assert!((ini - at_opt).abs() < 1e-6, "gap {}", ini - at_opt);
    }

    #[test]
    fn optimal_controls_vanish_on_hydrodynamic_path() {
        let m = 24;
        let model = smooth_model(m);
        let path = hydro_path(m, 1.0);
        let controls = optimal_controls(&model, &path).unwrap();
        assert!(
            controls.sup() < 1e-5,
            "hydrodynamic controls should vanish, sup = {:e}",
            controls.sup()
        );
    }

    #[test]
    fn optimal_controls_round_trip_through_tilted_solver() {
        let m = 24;
        let model = smooth_model(m);
        let law = smooth_law(m);
        let horizon = 1.0;
        let steps = 2000;
        let constant = ControlPath::from_fns(horizon, steps, m, |_, _| 0.3, |_, _| 0.1, |_, _| -0.2);
        let f_init = [
            law.rho0.values().to_vec(),
            law.rho1.values().to_vec(),
            law.rho2.values().to_vec(),
        ];
        let sol = solve_tilted(
            &model,
            &f_init,
            &constant,
            horizon,
            &SolverSettings {
                steps,
                ..Default::default()
            },
        )
        .unwrap();
        let recovered = optimal_controls(&model, &sol.path).unwrap();
        let mut worst = 0.0f64;
        for (j, want) in [(0usize, 0.3f64), (1, 0.1), (2, -0.2)] {
            for node in 0..recovered.num_nodes() {
                for v in recovered.node(j, node).values() {
                    worst = worst.max((v - want).abs());
                }
            }
        }
        assert!(worst < 1e-3, "recovered control error {worst:e}");
    }

    #[test]
    fn optimal_controls_reject_vanishing_component() {
        let m = 8;
        let model = smooth_model(m);
        // A path whose exposed density hits zero.
        let times: Vec<f64> = (0..=20).map(|j| j as f64 * 0.05).collect();
        let w: Vec<[Vec<f64>; 3]> = times
            .iter()
            .map(|t| {
                let decay = (-t).exp();
                [vec![0.4 * decay; m], vec![1e-16; m], vec![0.2 * decay; m]]
            })
            .collect();
        let path = DensityPath {
            times,
            w,
            provenance: crate::hydro::Provenance::User,
        };
        assert!(optimal_controls(&model, &path).is_err());
    }

    #[test]
    fn i_dyn_closed_zero_on_hydro_positive_on_tilted() {
        let m = 24;
        let model = smooth_model(m);
        let law = smooth_law(m);
        let path = hydro_path(m, 1.0);
        let at_hydro = i_dyn_closed(&model, &path).unwrap();
        assert!(at_hydro.abs() <= 1e-3, "I_dyn(mu) = {at_hydro}");
        assert!(at_hydro >= -1e-6, "dynamic rate must be nonnegative up to tolerance");

        let control = ControlPath::from_fns(
            1.0,
            2000,
            m,
            |_, u| 0.25 * (2.0 * PI * u).cos(),
            |_, _| 0.1,
            |t, _| -0.15 * t,
        );
        let f_init = [
            law.rho0.values().to_vec(),
            law.rho1.values().to_vec(),
            law.rho2.values().to_vec(),
        ];
        let tilted =
            solve_tilted(&model, &f_init, &control, 1.0, &SolverSettings::default()).unwrap();
        let at_tilted = i_dyn_closed(&model, &tilted.path).unwrap();
        assert!(at_tilted > 1e-4, "tilted path must cost positive rate, got {at_tilted}");

        // Supremum structure: the closed form dominates random controls and
        // coincides with eval_i1 at the optimizer.
        let opt = optimal_controls(&model, &tilted.path).unwrap();
        let via_i1 = eval_i1(&model, &tilted.path, &opt).unwrap().i1;
        assert!((via_i1 - at_tilted).abs() < 1e-8);
        let mut rng = replica_rng(3, 0);
        for _ in 0..100 {
            let random = random_smooth_control(&mut rng, 1.0, 2000, m, 0.3);
            let value = eval_i1(&model, &tilted.path, &random).unwrap().i1;
            assert!(value <= at_tilted + 1e-6, "random control beat the optimum");
        }
    }

    #[test]
    fn i1_affine_in_single_component() {
        let m = 16;
        let model = smooth_model(m);
        let path = hydro_path(m, 0.5);
        let mut rng = replica_rng(19, 0);
        let control = random_smooth_control(&mut rng, 0.5, path.num_nodes() - 1, m, 0.3);
        // Vary only W_2 between two paths: I1 is affine along that segment.
        let mut bumped = path.clone();
        for slice in bumped.w.iter_mut() {
            for v in slice[1].iter_mut() {
                *v *= 1.5;
            }
        }
        let mix = |a: &DensityPath, b: &DensityPath, theta: f64| -> DensityPath {
            let mut out = a.clone();
            for (j, slice) in out.w.iter_mut().enumerate() {
                for k in 0..3 {
                    for (x, v) in slice[k].iter_mut().enumerate() {
                        *v = (1.0 - theta) * a.w[j][k][x] + theta * b.w[j][k][x];
                    }
                }
            }
            out
        };
        let at = |p: &DensityPath| eval_i1(&model, p, &control).unwrap().i1;
        let theta = 0.3;
        let blended = at(&mix(&path, &bumped, theta));
        let expected = (1.0 - theta) * at(&path) + theta * at(&bumped);
        assert!(
            (blended - expected).abs() < 1e-12,
            "affinity violated: {blended} vs {expected}"
        );
    }

    #[test]
    fn empirical_i1_zero_control_is_exactly_one() {
        let m = 16;
        let model = smooth_model(m);
        let law = smooth_law(m);
        let zero = ControlPath::zero(1.0, 20, m);
        let estimate = tilting_identity_estimate(&model, &law, 20, 1.0, &zero, 50, 77);
        assert_eq!(estimate.mean, 1.0);
        assert_eq!(estimate.std_error, 0.0);
        assert!(!estimate.variance_blowup);
    }

    #[test]
    fn tilting_identity_contains_one_at_small_n() {
        let m = 16;
        let model = smooth_model(m);
        let law = smooth_law(m);
        let mut rng = replica_rng(23, 9);
        let control = random_smooth_control(&mut rng, 1.0, 40, m, 0.08);
        let estimate = tilting_identity_estimate(&model, &law, 30, 1.0, &control, 2000, 555);
        assert!(
            estimate.ci_low <= 1.0 && 1.0 <= estimate.ci_high,
            "CI [{}, {}] misses 1",
            estimate.ci_low,
            estimate.ci_high
        );
        assert!(!estimate.variance_blowup);
        assert!((estimate.mean - 1.0).abs() < 0.2);
    }

    #[test]
    fn variance_blowup_is_flagged() {
        // Controls far beyond the N * ||controls|| <= 10 guideline: the
        // weight e^{N I1} becomes heavy-tailed and the CI half-width blows.
        let m = 16;
        let model = smooth_model(m);
        let law = smooth_law(m);
        let mut rng = replica_rng(91, 1000);
        let big = random_smooth_control(&mut rng, 1.0, 20, m, 0.25);
        let estimate = tilting_identity_estimate(&model, &law, 200, 1.0, &big, 64, 91);
        assert!(
            estimate.variance_blowup,
            "large controls at N = 200 must blow the CI, got half-width {}",
            1.96 * estimate.std_error
        );
    }
}
