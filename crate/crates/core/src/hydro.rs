//! Deterministic density limits: the hydrodynamic ODE system, the tilted
//! limit ODE, admissibility checks and limit hitting times.
//!
//! Time integration is classical explicit fourth-order with a fixed step and
//! a half-step verification pass. The spatial integral
//! `int lambda(u, v) theta_I(v) dv` is a quadrature-weighted kernel product,
//! collapsing to one inner product per step under product-form kernels. The
//! solvers never clip densities; leaving the admissible region is an error,
//! not an approximation.

use crate::model::{ControlPath, InitialLaw, ModelError, RateModel, TorusFunction};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HydroError {
    #[error("step-halving estimate {estimate:e} exceeds tolerance {tol:e}")]
    StepSizeTooCoarse { estimate: f64, tol: f64 },
    #[error("initial densities are not a reasonable team at node {node}: {reason}")]
    NotReasonable { node: usize, reason: String },
    #[error("solution left the admissible region at t = {t}, node {node} (margin {margin:e})")]
    AdmissibilityLost { t: f64, node: usize, margin: f64 },
    #[error("threshold {c} outside the attained open interval ({lo}, {hi})")]
    OutOfRange { c: f64, lo: f64, hi: f64 },
    #[error("pairing not strictly increasing on the bracket at t = {t}")]
    NotMonotone { t: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Origin tag of a density path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Hydrodynamic,
    Tilted,
    Skeleton,
    User,
}

/// Time-indexed grid densities `(w_1, w_2, w_3)` on the torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityPath {
    pub times: Vec<f64>,
    /// `w[time][k]` is the grid of compartment `k+1` at that node.
    pub w: Vec<[Vec<f64>; 3]>,
    pub provenance: Provenance,
}

impl DensityPath {
    pub fn m(&self) -> usize {
        self.w[0][0].len()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn num_nodes(&self) -> usize {
        self.times.len()
    }

    /// Density of compartment `k` at time `t` by linear interpolation.
    pub fn density_at(&self, t: f64, k: usize) -> TorusFunction {
        let (j, frac) = self.locate(t);
        if frac == 0.0 {
            return TorusFunction::from_samples(self.w[j][k].clone());
        }
        let a = &self.w[j][k];
        let b = &self.w[j + 1][k];
        TorusFunction::from_samples(
            a.iter()
                .zip(b)
                .map(|(x, y)| x * (1.0 - frac) + y * frac)
                .collect(),
        )
    }

    pub fn locate(&self, t: f64) -> (usize, f64) {
        let n = self.times.len() - 1;
        let x = ((t - self.times[0]) / (self.horizon() - self.times[0])).clamp(0.0, 1.0) * n as f64;
        let j = (x.floor() as usize).min(n - 1);
        (j, x - j as f64)
    }

    /// Quadrature pairing `<w_{t_j,k}, f>` at a time node.
    pub fn pairing(&self, node: usize, k: usize, f: &TorusFunction) -> f64 {
        let m = self.m() as f64;
        self.w[node][k]
            .iter()
            .zip(f.values())
            .map(|(w, fv)| w * fv)
            .sum::<f64>()
            / m
    }

    /// `sum_k <w_{t_j,k}, f_k>` at every time node.
    pub fn sum_pairings(&self, tests: &[TorusFunction; 3]) -> Vec<f64> {
        (0..self.num_nodes())
            .map(|j| (0..3).map(|k| self.pairing(j, k, &tests[k])).sum())
            .collect()
    }

    /// Centered time derivative of compartment `k` at every node
    /// (second-order one-sided at the endpoints).
    pub fn time_derivative(&self, k: usize) -> Vec<Vec<f64>> {
        let nt = self.num_nodes();
        let m = self.m();
        let dt = self.dt();
        (0..nt)
            .map(|j| {
                (0..m)
                    .map(|x| {
                        if j == 0 {
                            (-3.0 * self.w[0][k][x] + 4.0 * self.w[1][k][x] - self.w[2][k][x])
                                / (2.0 * dt)
                        } else if j == nt - 1 {
                            (3.0 * self.w[nt - 1][k][x] - 4.0 * self.w[nt - 2][k][x]
                                + self.w[nt - 3][k][x])
                                / (2.0 * dt)
                        } else {
                            (self.w[j + 1][k][x] - self.w[j - 1][k][x]) / (2.0 * dt)
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Solver settings; `steps` is the number of RK4 steps over `[0, T]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverSettings {
    pub steps: usize,
    /// Run the half-step verification pass and compare against `tolerance`.
    pub verify_halving: bool,
    pub tolerance: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            steps: 2000,
            verify_halving: true,
            tolerance: 1e-8,
        }
    }
}

/// A solved path together with its accuracy diagnostics.
#[derive(Debug, Clone)]
pub struct HydroSolution {
    pub path: DensityPath,
    /// Sup-norm difference against the half-step rerun, when requested.
    pub halving_error: Option<f64>,
    /// Sup-norm residual of the integral-equation self-consistency check
    /// (tilted solves only).
    pub integral_residual: Option<f64>,
}

#[derive(Clone)]
struct GridState {
    s: Vec<f64>,
    e: Vec<f64>,
    i: Vec<f64>,
}

impl GridState {
    fn axpy(&self, dt: f64, d: &GridState) -> GridState {
        GridState {
            s: self.s.iter().zip(&d.s).map(|(a, b)| a + dt * b).collect(),
            e: self.e.iter().zip(&d.e).map(|(a, b)| a + dt * b).collect(),
            i: self.i.iter().zip(&d.i).map(|(a, b)| a + dt * b).collect(),
        }
    }

    fn rk4_combine(&self, dt: f64, k1: &GridState, k2: &GridState, k3: &GridState, k4: &GridState) -> GridState {
        let mix = |a: &[f64], b: &[f64], c: &[f64], d: &[f64], y: &[f64]| {
            y.iter()
                .enumerate()
                .map(|(x, v)| v + dt / 6.0 * (a[x] + 2.0 * b[x] + 2.0 * c[x] + d[x]))
                .collect::<Vec<f64>>()
        };
        GridState {
            s: mix(&k1.s, &k2.s, &k3.s, &k4.s, &self.s),
            e: mix(&k1.e, &k2.e, &k3.e, &k4.e, &self.e),
            i: mix(&k1.i, &k2.i, &k3.i, &k4.i, &self.i),
        }
    }
}

fn hydro_rhs(model: &RateModel, psi: &[f64], phi: &[f64], st: &GridState) -> GridState {
    let infect_field = model.lambda.apply_right(&st.i);
    let m = st.s.len();
    let mut out = GridState {
        s: vec![0.0; m],
        e: vec![0.0; m],
        i: vec![0.0; m],
    };
    for x in 0..m {
        let infection = st.s[x] * infect_field[x];
        out.s[x] = -infection;
        out.e[x] = infection - psi[x] * st.e[x];
        out.i[x] = psi[x] * st.e[x] - phi[x] * st.i[x];
    }
    out
}

fn rate_samples(f: &TorusFunction, m: usize) -> Vec<f64> {
    (0..m).map(|x| f.eval(x as f64 / m as f64)).collect()
}

/// Method-of-lines solve of the hydrodynamic system
/// `d theta_S/dt = -theta_S int lambda theta_I`,
/// `d theta_E/dt = theta_S int lambda theta_I - psi theta_E`,
/// `d theta_I/dt = psi theta_E - phi theta_I`
/// from `theta_0 = (rho_0, rho_1, rho_2)`.
pub fn solve_hydrodynamic(
    model: &RateModel,
    law: &InitialLaw,
    horizon: f64,
    settings: &SolverSettings,
) -> Result<HydroSolution, HydroError> {
    let m = model.grid_size();
    let init = GridState {
        s: rate_samples(&law.rho0, m),
        e: rate_samples(&law.rho1, m),
        i: rate_samples(&law.rho2, m),
    };
    let path = integrate_hydro(model, init.clone(), horizon, settings.steps);
    let halving_error = if settings.verify_halving {
        let fine = integrate_hydro(model, init, horizon, settings.steps * 2);
        let err = sup_difference(&path, &fine, 2);
        if err > settings.tolerance {
            return Err(HydroError::StepSizeTooCoarse {
                estimate: err,
                tol: settings.tolerance,
            });
        }
        Some(err)
    } else {
        None
    };
    Ok(HydroSolution {
        path,
        halving_error,
        integral_residual: None,
    })
}

fn integrate_hydro(model: &RateModel, init: GridState, horizon: f64, steps: usize) -> DensityPath {
    let m = model.grid_size();
    let psi = rate_samples(&model.psi, m);
    let phi = rate_samples(&model.phi, m);
    let dt = horizon / steps as f64;
    let mut state = init;
    let mut times = Vec::with_capacity(steps + 1);
    let mut w = Vec::with_capacity(steps + 1);
    times.push(0.0);
    w.push([state.s.clone(), state.e.clone(), state.i.clone()]);
    for step in 0..steps {
        let k1 = hydro_rhs(model, &psi, &phi, &state);
        let k2 = hydro_rhs(model, &psi, &phi, &state.axpy(dt / 2.0, &k1));
        let k3 = hydro_rhs(model, &psi, &phi, &state.axpy(dt / 2.0, &k2));
        let k4 = hydro_rhs(model, &psi, &phi, &state.axpy(dt, &k3));
        state = state.rk4_combine(dt, &k1, &k2, &k3, &k4);
        times.push((step + 1) as f64 * dt);
        w.push([state.s.clone(), state.e.clone(), state.i.clone()]);
    }
    DensityPath {
        times,
        w,
        provenance: Provenance::Hydrodynamic,
    }
}

/// Sup over shared nodes of the coarse path against a path with `ratio`
/// times finer steps.
fn sup_difference(coarse: &DensityPath, fine: &DensityPath, ratio: usize) -> f64 {
    let mut worst = 0.0f64;
    for (j, slice) in coarse.w.iter().enumerate() {
        let fs = &fine.w[j * ratio];
        for k in 0..3 {
            for (a, b) in slice[k].iter().zip(&fs[k]) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

/// Margin by which `(f1, f2, f3)` is a reasonable team:
/// `min(f1, f2, f3, 1 - f1 - f2 - f3)` over the grid.
fn reasonable_margin(f1: &[f64], f2: &[f64], f3: &[f64]) -> (f64, usize) {
    let mut worst = f64::INFINITY;
    let mut at = 0;
    for x in 0..f1.len() {
        let gaps = [f1[x], f2[x], f3[x], 1.0 - f1[x] - f2[x] - f3[x]];
        for g in gaps {
            if g < worst {
                worst = g;
                at = x;
            }
        }
    }
    (worst, at)
}

/// Solves the tilted limit system in the partial-sum variables
/// `(v_1, v_1 + v_2, v_1 + v_2 + v_3)` with right-hand sides
/// `-v_1 (int lambda v_3) e^{-F+G}`, `-psi v_2 e^{-G+H}`, `-phi v_3 e^{-H}`,
/// then verifies the solved path against the equivalent integral equation in
/// residual form.
pub fn solve_tilted(
    model: &RateModel,
    f_init: &[Vec<f64>; 3],
    control: &ControlPath,
    horizon: f64,
    settings: &SolverSettings,
) -> Result<HydroSolution, HydroError> {
    let m = model.grid_size();
    let (margin, node) = reasonable_margin(&f_init[0], &f_init[1], &f_init[2]);
    if margin <= 0.0 {
        return Err(HydroError::NotReasonable {
            node,
            reason: format!("chain margin {margin:e}"),
        });
    }
    if control.grid_size() != m {
        return Err(HydroError::Model(ModelError::GridMismatch(
            "control and model grids differ".into(),
        )));
    }
    let path = integrate_tilted(model, f_init, control, horizon, settings.steps)?;
    let halving_error = if settings.verify_halving {
        let fine = integrate_tilted(model, f_init, control, horizon, settings.steps * 2)?;
        let err = sup_difference(&path, &fine, 2);
        if err > settings.tolerance {
            return Err(HydroError::StepSizeTooCoarse {
                estimate: err,
                tol: settings.tolerance,
            });
        }
        Some(err)
    } else {
        None
    };
    let residual = integral_equation_residual(model, &path, control);
    Ok(HydroSolution {
        path,
        halving_error,
        integral_residual: Some(residual),
    })
}

fn tilt_factors(control: &ControlPath, t: f64, m: usize) -> [Vec<f64>; 3] {
    let mut out: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; m]);
    for x in 0..m {
        let u = x as f64 / m as f64;
        let f = control.eval(0, t, u);
        let g = control.eval(1, t, u);
        let h = control.eval(2, t, u);
        out[0][x] = (-f + g).exp();
        out[1][x] = (-g + h).exp();
        out[2][x] = (-h).exp();
    }
    out
}

fn integrate_tilted(
    model: &RateModel,
    f_init: &[Vec<f64>; 3],
    control: &ControlPath,
    horizon: f64,
    steps: usize,
) -> Result<DensityPath, HydroError> {
    let m = model.grid_size();
    let psi = rate_samples(&model.psi, m);
    let phi = rate_samples(&model.phi, m);
    let dt = horizon / steps as f64;
    // Partial-sum variables y1 = v1, y2 = v1 + v2, y3 = v1 + v2 + v3.
    let mut y1: Vec<f64> = f_init[0].clone();
    let mut y2: Vec<f64> = (0..m).map(|x| f_init[0][x] + f_init[1][x]).collect();
    let mut y3: Vec<f64> = (0..m).map(|x| y2[x] + f_init[2][x]).collect();
    let rhs = |t: f64, y1: &[f64], y2: &[f64], y3: &[f64]| -> [Vec<f64>; 3] {
        let factors = tilt_factors(control, t, m);
        let v3: Vec<f64> = (0..m).map(|x| y3[x] - y2[x]).collect();
        let infect_field = model.lambda.apply_right(&v3);
        let mut d: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; m]);
        for x in 0..m {
            let v2 = y2[x] - y1[x];
            d[0][x] = -y1[x] * infect_field[x] * factors[0][x];
            d[1][x] = -psi[x] * v2 * factors[1][x];
            d[2][x] = -phi[x] * v3[x] * factors[2][x];
        }
        d
    };
    let mut times = Vec::with_capacity(steps + 1);
    let mut w = Vec::with_capacity(steps + 1);
    let record = |y1: &[f64], y2: &[f64], y3: &[f64]| -> [Vec<f64>; 3] {
        [
            y1.to_vec(),
            (0..m).map(|x| y2[x] - y1[x]).collect(),
            (0..m).map(|x| y3[x] - y2[x]).collect(),
        ]
    };
    times.push(0.0);
    w.push(record(&y1, &y2, &y3));
    for step in 0..steps {
        let t = step as f64 * dt;
        let k1 = rhs(t, &y1, &y2, &y3);
        let mid1: Vec<Vec<f64>> = (0..3)
            .map(|c| {
                let base = [&y1, &y2, &y3][c];
                base.iter().zip(&k1[c]).map(|(a, b)| a + dt / 2.0 * b).collect()
            })
            .collect();
        let k2 = rhs(t + dt / 2.0, &mid1[0], &mid1[1], &mid1[2]);
        let mid2: Vec<Vec<f64>> = (0..3)
            .map(|c| {
                let base = [&y1, &y2, &y3][c];
                base.iter().zip(&k2[c]).map(|(a, b)| a + dt / 2.0 * b).collect()
            })
            .collect();
        let k3 = rhs(t + dt / 2.0, &mid2[0], &mid2[1], &mid2[2]);
        let end: Vec<Vec<f64>> = (0..3)
            .map(|c| {
                let base = [&y1, &y2, &y3][c];
                base.iter().zip(&k3[c]).map(|(a, b)| a + dt * b).collect()
            })
            .collect();
        let k4 = rhs(t + dt, &end[0], &end[1], &end[2]);
        for (c, y) in [&mut y1, &mut y2, &mut y3].into_iter().enumerate() {
            for x in 0..m {
                y[x] += dt / 6.0 * (k1[c][x] + 2.0 * k2[c][x] + 2.0 * k3[c][x] + k4[c][x]);
            }
        }
        let t_next = (step + 1) as f64 * dt;
        // The solver never clips: detect any exit from the reasonable region.
        for x in 0..m {
            let gaps = [y1[x], y2[x] - y1[x], y3[x] - y2[x], 1.0 - y3[x]];
            for g in gaps {
                if g <= 1e-14 {
                    return Err(HydroError::AdmissibilityLost {
                        t: t_next,
                        node: x,
                        margin: g,
                    });
                }
            }
        }
        times.push(t_next);
        w.push(record(&y1, &y2, &y3));
    }
    Ok(DensityPath {
        times,
        w,
        provenance: Provenance::Tilted,
    })
}

/// Sup-norm residual of the solved tilted path in the integral-equation
/// form, computed by independent composite-trapezoid quadrature of the
/// stored path.
fn integral_equation_residual(
    model: &RateModel,
    path: &DensityPath,
    control: &ControlPath,
) -> f64 {
    let m = path.m();
    let psi = rate_samples(&model.psi, m);
    let phi = rate_samples(&model.phi, m);
    let nt = path.num_nodes();
    let dt = path.dt();
    // Integrands of the three equations at every node.
    let mut rates = Vec::with_capacity(nt);
    for (j, slice) in path.w.iter().enumerate() {
        let factors = tilt_factors(control, path.times[j], m);
        let infect_field = model.lambda.apply_right(&slice[2]);
        let mut node = [vec![0.0; m], vec![0.0; m], vec![0.0; m]];
        for x in 0..m {
            let infection = slice[0][x] * infect_field[x] * factors[0][x];
            let progression = psi[x] * slice[1][x] * factors[1][x];
            let removal = phi[x] * slice[2][x] * factors[2][x];
            node[0][x] = -infection;
            node[1][x] = infection - progression;
            node[2][x] = progression - removal;
        }
        rates.push(node);
    }
    let mut worst = 0.0f64;
    let mut acc = [vec![0.0; m], vec![0.0; m], vec![0.0; m]];
    for j in 1..nt {
        for k in 0..3 {
            for x in 0..m {
                acc[k][x] += dt / 2.0 * (rates[j - 1][k][x] + rates[j][k][x]);
                let res = path.w[j][k][x] - path.w[0][k][x] - acc[k][x];
                worst = worst.max(res.abs());
            }
        }
    }
    worst
}

/// Which admissibility condition a path violates, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum D0Condition {
    /// Densities must stay strictly inside the chain
    /// `0 < w1 < w1+w2 < w1+w2+w3 < 1`.
    StrictChain,
    /// The partial sums must be strictly decreasing in time.
    DecreasingPartialSums,
}

/// Margin report of the admissibility check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct D0Report {
    pub admissible: bool,
    pub violated: Option<D0Condition>,
    /// Smallest gap in the strict chain over all nodes.
    pub chain_margin: f64,
    /// Smallest `-d/dt sum_{r<=k} w_r` over all nodes and k.
    pub derivative_margin: f64,
}

/// Checks the two pointwise conditions defining the admissible set: the
/// strict chain and strictly negative partial-sum time derivatives.
pub fn is_admissible_d0(path: &DensityPath) -> D0Report {
    let m = path.m();
    let mut chain_margin = f64::INFINITY;
    for slice in &path.w {
        for x in 0..m {
            let (w1, w2, w3) = (slice[0][x], slice[1][x], slice[2][x]);
            for g in [w1, w2, w3, 1.0 - w1 - w2 - w3] {
                chain_margin = chain_margin.min(g);
            }
        }
    }
    let d1 = path.time_derivative(0);
    let d2 = path.time_derivative(1);
    let d3 = path.time_derivative(2);
    let mut derivative_margin = f64::INFINITY;
    for j in 0..path.num_nodes() {
        for x in 0..m {
            let s1 = d1[j][x];
            let s2 = s1 + d2[j][x];
            let s3 = s2 + d3[j][x];
            for d in [s1, s2, s3] {
                derivative_margin = derivative_margin.min(-d);
            }
        }
    }
    let violated = if chain_margin <= 0.0 {
        Some(D0Condition::StrictChain)
    } else if derivative_margin <= 0.0 {
        Some(D0Condition::DecreasingPartialSums)
    } else {
        None
    };
    D0Report {
        admissible: violated.is_none(),
        violated,
        chain_margin,
        derivative_margin,
    }
}

/// A limit hitting time with the pairing's slope at the crossing.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HittingTime {
    pub tau: f64,
    pub derivative: f64,
}

/// First time `sum_k <w_{t,k}, f_k>` reaches `c`, by monotone bracketing on
/// the stored grid and local interpolation (`O(dt^2)` accurate).
pub fn hitting_time_limit(
    path: &DensityPath,
    tests: &[TorusFunction; 3],
    c: f64,
) -> Result<HittingTime, HydroError> {
    let pairing = path.sum_pairings(tests);
    // The monotone window starts at 0 and ends where the increase stops.
    let mut end = pairing.len() - 1;
    for j in 0..pairing.len() - 1 {
        if pairing[j + 1] <= pairing[j] {
            end = j;
            break;
        }
    }
    let (lo, hi) = (pairing[0], pairing[end]);
    if !(c > lo && c < hi) {
        return Err(HydroError::OutOfRange { c, lo, hi });
    }
    let j = (0..end)
        .find(|&j| pairing[j] <= c && c < pairing[j + 1])
        .ok_or(HydroError::NotMonotone { t: path.times[end] })?;
    let dt = path.dt();
    let slope = (pairing[j + 1] - pairing[j]) / dt;
    if slope <= 0.0 {
        return Err(HydroError::NotMonotone { t: path.times[j] });
    }
    let tau = path.times[j] + (c - pairing[j]) / slope;
    // Slope refined by the neighbouring secants around the crossing.
    let derivative = if j + 2 < pairing.len() && j > 0 {
        let left = (pairing[j + 1] - pairing[j - 1]) / (2.0 * dt);
        let right = (pairing[j + 2] - pairing[j]) / (2.0 * dt);
        let frac = (tau - path.times[j]) / dt;
        left * (1.0 - frac) + right * frac
    } else {
        slope
    };
    Ok(HittingTime { tau, derivative })
}

#[cfg(test)]
mod tests {
    use super::*;
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

    /// Independent scalar SEIR integrator (implicit midpoint with fixed-point
    /// iterations) used as the uniqueness probe.
    fn scalar_seir_implicit(
        lam: f64,
        psi: f64,
        phi: f64,
        init: [f64; 3],
        horizon: f64,
        steps: usize,
    ) -> Vec<[f64; 3]> {
        let dt = horizon / steps as f64;
        let rhs = |y: [f64; 3]| {
            [
                -lam * y[0] * y[2],
                lam * y[0] * y[2] - psi * y[1],
                psi * y[1] - phi * y[2],
            ]
        };
        let mut y = init;
        let mut out = vec![y];
        for _ in 0..steps {
            let mut mid = y;
            for _ in 0..50 {
                let d = rhs(mid);
                let next = [
                    y[0] + dt / 2.0 * d[0],
                    y[1] + dt / 2.0 * d[1],
                    y[2] + dt / 2.0 * d[2],
                ];
                if (0..3).all(|k| (next[k] - mid[k]).abs() < 1e-15) {
                    mid = next;
                    break;
                }
                mid = next;
            }
            let d = rhs(mid);
            y = [y[0] + dt * d[0], y[1] + dt * d[1], y[2] + dt * d[2]];
            out.push(y);
        }
        out
    }

    #[test]
    fn zero_infection_keeps_susceptibles_constant() {
        let m = 16;
        let model = RateModel {
            lambda: Kernel::Product {
                lambda1: TorusFunction::constant(m, 1e-300),
                lambda2: TorusFunction::constant(m, 1e-300),
            },
            psi: TorusFunction::constant(m, 1.0),
            phi: TorusFunction::constant(m, 1.0),
        };
        let law = smooth_law(m);
        let sol = solve_hydrodynamic(&model, &law, 2.0, &SolverSettings::default()).unwrap();
        for slice in &sol.path.w {
            for x in 0..m {
                assert!((slice[0][x] - sol.path.w[0][0][x]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn homogeneous_reduction_matches_scalar_seir() {
        let m = 32;
        let (lam, psi, phi) = (1.4, 0.8, 0.5);
        let model = RateModel {
            lambda: Kernel::Product {
                lambda1: TorusFunction::constant(m, lam),
                lambda2: TorusFunction::constant(m, 1.0),
            },
            psi: TorusFunction::constant(m, psi),
            phi: TorusFunction::constant(m, phi),
        };
        let law = InitialLaw {
            rho0: TorusFunction::constant(m, 0.6),
            rho1: TorusFunction::constant(m, 0.1),
            rho2: TorusFunction::constant(m, 0.1),
        };
        let horizon = 2.0;
        let sol = solve_hydrodynamic(&model, &law, horizon, &SolverSettings::default()).unwrap();
        let scalar = scalar_seir_implicit(lam, psi, phi, [0.6, 0.1, 0.1], horizon, 40_000);
        let mut worst = 0.0f64;
        for (j, slice) in sol.path.w.iter().enumerate() {
            let t = sol.path.times[j];
            let idx = ((t / horizon) * 40_000.0).round() as usize;
            for k in 0..3 {
                let spatial_mean: f64 = slice[k].iter().sum::<f64>() / m as f64;
                worst = worst.max((spatial_mean - scalar[idx][k]).abs());
            }
        }
        assert!(worst < 1e-6, "sup error {worst:e}");
    }

    #[test]
    fn three_species_sum_decays_with_removal_only() {
        let model = smooth_model(24);
        let law = smooth_law(24);
        let sol = solve_hydrodynamic(&model, &law, 2.0, &SolverSettings::default()).unwrap();
        // d/dt (S+E+I) = -phi I <= 0, and adding back the removed mass keeps
        // the total constant.
        let m = 24;
        let dt = sol.path.dt();
        let mut removed = vec![0.0f64; m];
        for j in 0..sol.path.num_nodes() {
            let slice = &sol.path.w[j];
            for x in 0..m {
                let total =
                    slice[0][x] + slice[1][x] + slice[2][x] + removed[x];
                let initial: f64 = (0..3).map(|k| sol.path.w[0][k][x]).sum();
                assert!((total - initial).abs() < 1e-6, "node {x} at step {j}");
            }
            if j + 1 < sol.path.num_nodes() {
                let next = &sol.path.w[j + 1];
                for x in 0..m {
                    let sum_now: f64 = (0..3).map(|k| slice[k][x]).sum();
                    let sum_next: f64 = (0..3).map(|k| next[k][x]).sum();
                    assert!(sum_next <= sum_now + 1e-12);
                    // Trapezoid accumulation of the removal flux.
                    let phi_x = model.phi.eval(x as f64 / m as f64);
                    removed[x] += dt / 2.0 * phi_x * (slice[2][x] + next[2][x]);
                }
            }
        }
    }

    #[test]
    fn tilted_zero_control_equals_hydrodynamic() {
        let m = 24;
        let model = smooth_model(m);
        let law = smooth_law(m);
        let settings = SolverSettings::default();
        let hydro = solve_hydrodynamic(&model, &law, 1.5, &settings).unwrap();
        let zero = ControlPath::zero(1.5, 100, m);
        let f_init = [
            hydro.path.w[0][0].clone(),
            hydro.path.w[0][1].clone(),
            hydro.path.w[0][2].clone(),
        ];
        let tilted = solve_tilted(&model, &f_init, &zero, 1.5, &settings).unwrap();
        let mut worst = 0.0f64;
        for j in 0..hydro.path.num_nodes() {
            for k in 0..3 {
                for x in 0..m {
                    worst = worst.max((hydro.path.w[j][k][x] - tilted.path.w[j][k][x]).abs());
                }
            }
        }
        assert!(worst < 1e-8, "sup deviation {worst:e}");
        assert!(tilted.integral_residual.unwrap() < 1e-6);
    }

    #[test]
    fn positive_h_slows_removal() {
        let m = 16;
        let model = smooth_model(m);
        let law = smooth_law(m);
        let settings = SolverSettings {
            steps: 1000,
            ..Default::default()
        };
        let horizon = 1.0;
        let hydro = solve_hydrodynamic(&model, &law, horizon, &settings).unwrap();
        let slow = ControlPath::from_fns(horizon, 50, m, |_, _| 0.0, |_, _| 0.0, |_, _| 2.0);
        let f_init = [
            hydro.path.w[0][0].clone(),
            hydro.path.w[0][1].clone(),
            hydro.path.w[0][2].clone(),
        ];
        let tilted = solve_tilted(&model, &f_init, &slow, horizon, &settings).unwrap();
        for j in 1..hydro.path.num_nodes() {
            for x in 0..m {
                let total_untilted: f64 = (0..3).map(|k| hydro.path.w[j][k][x]).sum();
                let total_tilted: f64 = (0..3).map(|k| tilted.path.w[j][k][x]).sum();
                assert!(
                    total_tilted >= total_untilted - 1e-12,
                    "slowed removal must keep more mass (t index {j}, node {x})"
                );
            }
        }
    }

    #[test]
    fn unreasonable_initial_team_rejected() {
        let m = 8;
        let model = smooth_model(m);
        let f_init = [vec![0.5; m], vec![0.0; m], vec![0.2; m]];
        let zero = ControlPath::zero(1.0, 10, m);
        let err = solve_tilted(&model, &f_init, &zero, 1.0, &SolverSettings::default());
        assert!(matches!(err, Err(HydroError::NotReasonable { .. })));
    }

    #[test]
    fn admissibility_loss_is_an_error_not_a_clip() {
        // A strongly negative F inflates the infection factor e^{-F+G} by
        // e^{6}; the susceptible density collapses below the floor inside
        // the horizon and the solver must refuse rather than clip.
        let m = 8;
        let model = smooth_model(m);
        let law = smooth_law(m);
        let f_init = [
            rate_samples(&law.rho0, m),
            rate_samples(&law.rho1, m),
            rate_samples(&law.rho2, m),
        ];
        let push = ControlPath::from_fns(4.0, 40, m, |_, _| -6.0, |_, _| 0.0, |_, _| 0.0);
        let err = solve_tilted(
            &model,
            &f_init,
            &push,
            4.0,
            &SolverSettings {
                steps: 4000,
                verify_halving: false,
                tolerance: 1e-8,
            },
        );
        assert!(
            matches!(err, Err(HydroError::AdmissibilityLost { .. })),
            "expected admissibility loss, got {err:?}"
        );
    }

    #[test]
    fn hydrodynamic_path_is_admissible() {
        let model = smooth_model(24);
        let law = smooth_law(24);
        let sol = solve_hydrodynamic(&model, &law, 1.0, &SolverSettings::default()).unwrap();
        let report = is_admissible_d0(&sol.path);
        assert!(report.admissible, "{report:?}");
        assert!(report.chain_margin > 0.0);
        assert!(report.derivative_margin > 0.0);
    }

    #[test]
    fn admissibility_rejects_degenerate_paths() {
        let m = 8;
        let times: Vec<f64> = (0..=10).map(|j| j as f64 * 0.1).collect();
        // w2 identically zero: strict chain broken.
        let w: Vec<[Vec<f64>; 3]> = (0..=10)
            .map(|j| {
                let decay = (-0.1 * j as f64).exp();
                [
                    vec![0.5 * decay; m],
                    vec![0.0; m],
                    vec![0.2 * decay; m],
                ]
            })
            .collect();
        let path = DensityPath {
            times: times.clone(),
            w,
            provenance: Provenance::User,
        };
        let report = is_admissible_d0(&path);
        assert!(!report.admissible);
        assert_eq!(report.violated, Some(D0Condition::StrictChain));

        // Constant path: derivatives vanish, condition (3) broken.
        let w_const: Vec<[Vec<f64>; 3]> = (0..=10)
            .map(|_| [vec![0.4; m], vec![0.2; m], vec![0.2; m]])
            .collect();
        let path = DensityPath {
            times,
            w: w_const,
            provenance: Provenance::User,
        };
        let report = is_admissible_d0(&path);
        assert!(!report.admissible);
        assert_eq!(report.violated, Some(D0Condition::DecreasingPartialSums));
    }

    #[test]
    fn hitting_time_bracketing_and_convergence() {
        let m = 24;
        let model = smooth_model(m);
        let law = smooth_law(m);
        let tests = [
            TorusFunction::constant(m, 0.0),
            TorusFunction::constant(m, 0.0),
            TorusFunction::constant(m, 1.0),
        ];
        let solve = |steps: usize| {
            solve_hydrodynamic(
                &model,
                &law,
                0.8,
                &SolverSettings {
                    steps,
                    verify_halving: false,
                    tolerance: 1e-8,
                },
            )
            .unwrap()
            .path
        };
        let coarse = solve(250);
        let fine = solve(500);
        let finest = solve(1000);
        let pair = coarse.sum_pairings(&tests);
        let c = 0.5 * (pair[0] + pair.iter().cloned().fold(f64::MIN, f64::max));
        let t1 = hitting_time_limit(&coarse, &tests, c).unwrap();
        let t2 = hitting_time_limit(&fine, &tests, c).unwrap();
        let t3 = hitting_time_limit(&finest, &tests, c).unwrap();
        assert!(t1.derivative > 0.0);
        // Second-order convergence: refining dt by 2 shrinks the change by
        // about 4; allow slack for the smooth-curvature constant.
        let e1 = (t1.tau - t3.tau).abs();
        let e2 = (t2.tau - t3.tau).abs();
        assert!(e2 <= e1 / 2.0 + 1e-10, "e1 = {e1:e}, e2 = {e2:e}");

        // Out-of-range thresholds.
        assert!(matches!(
            hitting_time_limit(&coarse, &tests, pair[0] - 0.1),
            Err(HydroError::OutOfRange { .. })
        ));
    }

    #[test]
    fn gronwall_stability_of_tilted_solver() {
        let m = 16;
        let model = smooth_model(m);
        let law = smooth_law(m);
        let horizon = 1.0;
        let control = ControlPath::from_fns(
            horizon,
            40,
            m,
            |t, u| 0.2 * (2.0 * PI * u).cos() * t,
            |t, _| 0.1 * t,
            |_, u| -0.1 * (2.0 * PI * u).sin(),
        );
        let settings = SolverSettings {
            steps: 800,
            verify_halving: false,
            tolerance: 1e-8,
        };
        let base = [
            rate_samples(&law.rho0, m),
            rate_samples(&law.rho1, m),
            rate_samples(&law.rho2, m),
        ];
        let delta = 1e-6;
        let bumped = [
            base[0].iter().map(|v| v + delta).collect::<Vec<_>>(),
            base[1].clone(),
            base[2].clone(),
        ];
        let a = solve_tilted(&model, &base, &control, horizon, &settings).unwrap();
        let b = solve_tilted(&model, &bumped, &control, horizon, &settings).unwrap();
        let mut worst = 0.0f64;
        for j in 0..a.path.num_nodes() {
            for k in 0..3 {
                for x in 0..m {
                    worst = worst.max((a.path.w[j][k][x] - b.path.w[j][k][x]).abs());
                }
            }
        }
        let lam_sup = model.lambda.sup();
        let psi_sup = model.psi.max();
        let phi_sup = model.phi.max();
        let k1 = 2.0 * (lam_sup + psi_sup + phi_sup) * control.sup().exp().powi(3);
        assert!(
            worst <= delta * (k1 * horizon).exp(),
            "perturbation grew beyond the Gronwall bound: {worst:e}"
        );
    }

    #[test]
    fn uniqueness_probe_against_implicit_integrator() {
        // Homogeneous data: the spatial system collapses to the scalar one,
        // solved here by an unrelated implicit method.
        let m = 8;
        let (lam, psi, phi) = (1.1, 0.7, 0.45);
        let model = RateModel {
            lambda: Kernel::Product {
                lambda1: TorusFunction::constant(m, lam),
                lambda2: TorusFunction::constant(m, 1.0),
            },
            psi: TorusFunction::constant(m, psi),
            phi: TorusFunction::constant(m, phi),
        };
        let law = InitialLaw {
            rho0: TorusFunction::constant(m, 0.55),
            rho1: TorusFunction::constant(m, 0.2),
            rho2: TorusFunction::constant(m, 0.15),
        };
        let sol = solve_hydrodynamic(&model, &law, 1.0, &SolverSettings::default()).unwrap();
        let implicit = scalar_seir_implicit(lam, psi, phi, [0.55, 0.2, 0.15], 1.0, 20_000);
        let final_slice = sol.path.w.last().unwrap();
        for k in 0..3 {
            let got = final_slice[k][0];
            let want = implicit.last().unwrap()[k];
            assert!((got - want).abs() < 1e-7, "component {k}: {got} vs {want}");
        }
    }
}
