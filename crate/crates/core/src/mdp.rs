//! Moderate-deviation machinery around the hydrodynamic path: linearized
//! operators and the propagator, quadratic forms, skeleton paths and the
//! hitting-time rate coefficients.
//!
//! Grid conventions. Measures are stored as signed grid densities with the
//! uniform quadrature weight `1/M`; test functions as grid samples. The
//! linearized operators act as
//!
//! * `P1_s f = f * int lambda(., v) theta_I(v) dv` (diagonal),
//! * `P2_s f = int theta_S(v) lambda(v, .) f(v) dv`,
//! * `P3 f = psi f`, `P4 f = phi f` (diagonal),
//!
//! and the skeleton evolution of a measure triple `W` reads
//! `dW/dt = Xi* W + R_t` with the source triple built from the generating
//! tilt. The propagator `Phi_t` solves `dPhi/dt = -Xi_t Phi`, `Phi_0 = id`,
//! on the function side; on the grid its adjoint is the plain transpose.
//! `Xi` is taken as the grid adjoint of the skeleton generator — the
//! orientation that makes the duality `<Phi* nu, g> = <nu, Phi g>` and the
//! Duhamel solution of the skeleton equation hold simultaneously.

use crate::hydro::{DensityPath, Provenance};
use crate::ldp::eval_l1;
use crate::model::{ControlPath, InitialLaw, RateModel, TorusFunction};
use crate::ssa::Trajectory;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("propagator conditioning estimate {0:e} exceeds 1e12")]
    SingularPropagator(f64),
    #[error("skeleton methods disagree: sup pairing discrepancy {0:e}")]
    MethodsDisagree(f64),
    #[error("contraction denominator {0:e} is not strictly positive")]
    DegenerateDenominator(f64),
    #[error("pairing derivative {0:e} at the hitting time is not strictly positive")]
    NotMonotone(f64),
}

/// Audit tolerance for the direct-vs-Duhamel skeleton cross-check;
/// [`MdpError::MethodsDisagree`] fires at 10x this value.
pub const DUHAMEL_TOL: f64 = 1e-5;

/// The four linearized operators at one time node, plus the assembled
/// `3M x 3M` generator block matrix.
#[derive(Debug, Clone)]
pub struct OperatorSet {
    /// Diagonal of `P1`: `int lambda(u_x, v) theta_I(v) dv`.
    pub p1_diag: Vec<f64>,
    /// Dense `P2` with quadrature weights baked in: entry `(x, y)` holds
    /// `theta_S(u_y) lambda(u_y, u_x) / M`.
    pub p2: DMatrix<f64>,
    /// Diagonal of `P3 = psi`.
    pub p3_diag: Vec<f64>,
    /// Diagonal of `P4 = phi`.
    pub p4_diag: Vec<f64>,
    /// Assembled function-side generator (the `Xi` of `dPhi/dt = -Xi Phi`).
    pub xi: DMatrix<f64>,
}

/// Time-interpolated coefficient fields of `Xi_t`.
struct XiCoeffs {
    theta_s: Vec<f64>,
    /// `int lambda(u, v) theta_I(v) dv` at the evaluation time.
    p1: Vec<f64>,
}

/// Hydrodynamic coefficient data sampled on the path grid.
struct CoeffTable {
    times: Vec<f64>,
    theta_s: Vec<Vec<f64>>,
    p1: Vec<Vec<f64>>,
    psi: Vec<f64>,
    phi: Vec<f64>,
}

impl CoeffTable {
    fn new(model: &RateModel, theta: &DensityPath) -> Self {
        let m = theta.m();
        Self {
            times: theta.times.clone(),
            theta_s: theta.w.iter().map(|slice| slice[0].clone()).collect(),
            p1: theta
                .w
                .iter()
                .map(|slice| model.lambda.apply_right(&slice[2]))
                .collect(),
            psi: (0..m).map(|x| model.psi.eval(x as f64 / m as f64)).collect(),
            phi: (0..m).map(|x| model.phi.eval(x as f64 / m as f64)).collect(),
        }
    }

    fn at(&self, t: f64) -> XiCoeffs {
        let horizon = *self.times.last().unwrap();
        let n = self.times.len() - 1;
        let x = (t / horizon).clamp(0.0, 1.0) * n as f64;
        let j = (x.floor() as usize).min(n - 1);
        let frac = x - j as f64;
        let lerp = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter()
                .zip(b)
                .map(|(p, q)| p * (1.0 - frac) + q * frac)
                .collect()
        };
        XiCoeffs {
            theta_s: lerp(&self.theta_s[j], &self.theta_s[j + 1]),
            p1: lerp(&self.p1[j], &self.p1[j + 1]),
        }
    }
}

/// `Xi g` on a stacked function triple:
/// `(Xi g)_1 = P1 (g2 - g1)`, `(Xi g)_2 = P3 (g3 - g2)`,
/// `(Xi g)_3 = P2 (g2 - g1) - P4 g3`.
fn apply_xi_function(
    model: &RateModel,
    coeffs: &XiCoeffs,
    psi: &[f64],
    phi: &[f64],
    g: &[f64],
    out: &mut [f64],
) {
    let m = psi.len();
    let (g1, rest) = g.split_at(m);
    let (g2, g3) = rest.split_at(m);
    let weighted: Vec<f64> = (0..m)
        .map(|x| coeffs.theta_s[x] * (g2[x] - g1[x]))
        .collect();
    let p2_diff = model.lambda.apply_left(&weighted);
    for x in 0..m {
        out[x] = coeffs.p1[x] * (g2[x] - g1[x]);
        out[m + x] = psi[x] * (g3[x] - g2[x]);
        out[2 * m + x] = p2_diff[x] - phi[x] * g3[x];
    }
}

/// `Xi* d` on a signed density triple:
/// `(Xi* d)_1 = -P1 d1 - theta_S (Lambda d3)`,
/// `(Xi* d)_2 = +P1 d1 - psi d2 + theta_S (Lambda d3)`,
/// `(Xi* d)_3 = +psi d2 - phi d3`.
fn apply_xi_adjoint_density(
    model: &RateModel,
    coeffs: &XiCoeffs,
    psi: &[f64],
    phi: &[f64],
    d: &[Vec<f64>; 3],
    out: &mut [Vec<f64>; 3],
) {
    let m = psi.len();
    let lam_d3 = model.lambda.apply_right(&d[2]);
    for x in 0..m {
        let infection = coeffs.p1[x] * d[0][x] + coeffs.theta_s[x] * lam_d3[x];
        let progression = psi[x] * d[1][x];
        out[0][x] = -infection;
        out[1][x] = infection - progression;
        out[2][x] = progression - phi[x] * d[2][x];
    }
}

/// Builds the explicit operator set at one time node of the path.
pub fn operator_set(model: &RateModel, theta: &DensityPath, node: usize) -> OperatorSet {
    let m = theta.m();
    let quad = 1.0 / m as f64;
    let p1_diag = model.lambda.apply_right(&theta.w[node][2]);
    let theta_s = &theta.w[node][0];
    let mut p2 = DMatrix::zeros(m, m);
    for x in 0..m {
        for y in 0..m {
            p2[(x, y)] =
                quad * theta_s[y] * model.lambda.eval(y as f64 / m as f64, x as f64 / m as f64);
        }
    }
    let p3_diag: Vec<f64> = (0..m).map(|x| model.psi.eval(x as f64 / m as f64)).collect();
    let p4_diag: Vec<f64> = (0..m).map(|x| model.phi.eval(x as f64 / m as f64)).collect();
    let mut xi = DMatrix::zeros(3 * m, 3 * m);
    for x in 0..m {
        // Row block 1: P1 (g2 - g1).
        xi[(x, x)] = -p1_diag[x];
        xi[(x, m + x)] = p1_diag[x];
        // Row block 2: P3 (g3 - g2).
        xi[(m + x, m + x)] = -p3_diag[x];
        xi[(m + x, 2 * m + x)] = p3_diag[x];
        // Row block 3: P2 (g2 - g1) - P4 g3.
        for y in 0..m {
            xi[(2 * m + x, y)] = -p2[(x, y)];
            xi[(2 * m + x, m + y)] = p2[(x, y)];
        }
        xi[(2 * m + x, 2 * m + x)] -= p4_diag[x];
    }
    OperatorSet {
        p1_diag,
        p2,
        p3_diag,
        p4_diag,
        xi,
    }
}

/// Matrix RK4 step of `dPhi/dt = -Xi_t Phi` from `t` with step `h`.
fn step_matrix(
    model: &RateModel,
    table: &CoeffTable,
    phi: &DMatrix<f64>,
    t: f64,
    h: f64,
) -> DMatrix<f64> {
    let dim = phi.nrows();
    let apply = |t: f64, mat: &DMatrix<f64>| -> DMatrix<f64> {
        let coeffs = table.at(t);
        let mut out = DMatrix::zeros(dim, dim);
        let mut col_in = vec![0.0; dim];
        let mut col_out = vec![0.0; dim];
        for c in 0..dim {
            for (slot, v) in col_in.iter_mut().zip(mat.column(c).iter()) {
                *slot = *v;
            }
            apply_xi_function(model, &coeffs, &table.psi, &table.phi, &col_in, &mut col_out);
            for r in 0..dim {
                out[(r, c)] = -col_out[r];
            }
        }
        out
    };
    let k1 = apply(t, phi);
    let k2 = apply(t + h / 2.0, &(phi + &k1 * (h / 2.0)));
    let k3 = apply(t + h / 2.0, &(phi + &k2 * (h / 2.0)));
    let k4 = apply(t + h, &(phi + &k3 * h));
    phi + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Vector RK4 step of `dv/dt = -Xi_t v`.
fn step_vector(model: &RateModel, table: &CoeffTable, v: &[f64], t: f64, h: f64) -> Vec<f64> {
    let dim = v.len();
    let apply = |t: f64, x: &[f64]| -> Vec<f64> {
        let coeffs = table.at(t);
        let mut out = vec![0.0; dim];
        apply_xi_function(model, &coeffs, &table.psi, &table.phi, x, &mut out);
        out.iter_mut().for_each(|o| *o = -*o);
        out
    };
    let k1 = apply(t, v);
    let mid1: Vec<f64> = v.iter().zip(&k1).map(|(a, b)| a + h / 2.0 * b).collect();
    let k2 = apply(t + h / 2.0, &mid1);
    let mid2: Vec<f64> = v.iter().zip(&k2).map(|(a, b)| a + h / 2.0 * b).collect();
    let k3 = apply(t + h / 2.0, &mid2);
    let end: Vec<f64> = v.iter().zip(&k3).map(|(a, b)| a + h * b).collect();
    let k4 = apply(t + h, &end);
    (0..dim)
        .map(|x| v[x] + h / 6.0 * (k1[x] + 2.0 * k2[x] + 2.0 * k3[x] + k4[x]))
        .collect()
}

/// The fundamental solution `Phi_t` of `dPhi/dt = -Xi_t Phi`, stored at
/// checkpoint nodes, with the final-time factorization cached for
/// `Phi_T^{-1}` solves (never an explicit inverse).
pub struct Propagator {
    m: usize,
    times: Vec<f64>,
    stride: usize,
    checkpoints: Vec<DMatrix<f64>>,
    lu_final: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    phi_final: DMatrix<f64>,
    /// 1-norm condition estimate of `Phi_T`.
    pub condition: f64,
    coeffs: CoeffTable,
}

/// Integrates the propagator along a hydrodynamic path.
pub fn build_propagator(model: &RateModel, theta: &DensityPath) -> Result<Propagator, MdpError> {
    let m = theta.m();
    if m != model.grid_size() {
        return Err(MdpError::GridMismatch(format!(
            "model grid {} vs path grid {}",
            model.grid_size(),
            m
        )));
    }
    let dim = 3 * m;
    let table = CoeffTable::new(model, theta);
    let nt = theta.num_nodes();
    let stride = ((nt - 1) / 96).max(1);
    let mut phi = DMatrix::identity(dim, dim);
    let mut checkpoints = vec![phi.clone()];
    for j in 0..nt - 1 {
        let h = theta.times[j + 1] - theta.times[j];
        phi = step_matrix(model, &table, &phi, theta.times[j], h);
        if (j + 1) % stride == 0 {
            checkpoints.push(phi.clone());
        }
    }
    let phi_final = phi.clone();
    let lu_final = phi.lu();
    // 1-norm condition estimate via solves against the basis vectors.
    let norm_phi = one_norm(&phi_final);
    let mut norm_inv = 0.0f64;
    for c in 0..dim {
        let mut e = nalgebra::DVector::zeros(dim);
        e[c] = 1.0;
        match lu_final.solve(&e) {
            Some(col) => norm_inv = norm_inv.max(col.iter().map(|v| v.abs()).sum()),
            None => return Err(MdpError::SingularPropagator(f64::INFINITY)),
        }
    }
    let condition = norm_phi * norm_inv;
    if condition > 1e12 {
        return Err(MdpError::SingularPropagator(condition));
    }
    Ok(Propagator {
        m,
        times: theta.times.clone(),
        stride,
        checkpoints,
        lu_final,
        phi_final,
        condition,
        coeffs: table,
    })
}

fn one_norm(mat: &DMatrix<f64>) -> f64 {
    (0..mat.ncols())
        .map(|c| mat.column(c).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

impl Propagator {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn checkpoints(&self) -> &[DMatrix<f64>] {
        &self.checkpoints
    }

    /// `Phi(0)`, exactly the identity.
    pub fn initial_matrix(&self) -> &DMatrix<f64> {
        &self.checkpoints[0]
    }

    pub fn final_matrix(&self) -> &DMatrix<f64> {
        &self.phi_final
    }

    /// Reconstructs the full matrix `Phi(t_node)` from the nearest earlier
    /// checkpoint (no stepping at checkpoint nodes).
    pub fn matrix_at(&self, model: &RateModel, node: usize) -> DMatrix<f64> {
        let cp = (node / self.stride).min(self.checkpoints.len() - 1);
        let mut phi = self.checkpoints[cp].clone();
        let mut j = cp * self.stride;
        while j < node {
            let h = self.times[j + 1] - self.times[j];
            phi = step_matrix(model, &self.coeffs, &phi, self.times[j], h);
            j += 1;
        }
        phi
    }

    /// `Phi(t_node) g` for a stacked function triple.
    pub fn apply(&self, model: &RateModel, node: usize, g: &[f64]) -> Vec<f64> {
        let cp = (node / self.stride).min(self.checkpoints.len() - 1);
        let base = &self.checkpoints[cp];
        let gv = nalgebra::DVector::from_column_slice(g);
        let mut v: Vec<f64> = (base * gv).iter().copied().collect();
        let mut j = cp * self.stride;
        while j < node {
            let h = self.times[j + 1] - self.times[j];
            v = step_vector(model, &self.coeffs, &v, self.times[j], h);
            j += 1;
        }
        v
    }

    /// `Phi(t_node)^T nu` on a stacked coefficient vector: the grid adjoint,
    /// satisfying `<Phi* nu, g> = <nu, Phi g>` as the transpose relation.
    pub fn apply_adjoint(&self, model: &RateModel, node: usize, nu: &[f64]) -> Vec<f64> {
        let phi = self.matrix_at(model, node);
        let nv = nalgebra::DVector::from_column_slice(nu);
        (phi.transpose() * nv).iter().copied().collect()
    }

    /// `Phi(T)^{-1} g` by the cached factorization.
    pub fn solve_inverse(&self, g: &[f64]) -> Vec<f64> {
        let gv = nalgebra::DVector::from_column_slice(g);
        self.lu_final
            .solve(&gv)
            .expect("conditioning was verified at build time")
            .iter()
            .copied()
            .collect()
    }

    /// The control-triple family `s -> Phi_s Phi(T)^{-1} f` on the path
    /// grid, used by the contraction formulas.
    pub fn propagated_family(&self, model: &RateModel, tests: &[TorusFunction; 3]) -> ControlPath {
        let g = self.solve_inverse(&stack_tests(tests, self.m));
        let nt = self.times.len();
        let mut f_nodes = Vec::with_capacity(nt);
        let mut g_nodes = Vec::with_capacity(nt);
        let mut h_nodes = Vec::with_capacity(nt);
        let mut v = g;
        for j in 0..nt {
            if j > 0 {
                let h = self.times[j] - self.times[j - 1];
                v = step_vector(model, &self.coeffs, &v, self.times[j - 1], h);
            }
            f_nodes.push(TorusFunction::from_samples(v[..self.m].to_vec()));
            g_nodes.push(TorusFunction::from_samples(v[self.m..2 * self.m].to_vec()));
            h_nodes.push(TorusFunction::from_samples(v[2 * self.m..].to_vec()));
        }
        ControlPath::new(self.horizon(), f_nodes, g_nodes, h_nodes)
            .expect("family nodes share the path grid")
    }
}

fn stack_tests(tests: &[TorusFunction; 3], m: usize) -> Vec<f64> {
    assert!(tests.iter().all(|t| t.grid_size() == m), "test grid mismatch");
    let mut g = Vec::with_capacity(3 * m);
    for t in tests {
        g.extend_from_slice(t.values());
    }
    g
}

fn check_path_control(path: &DensityPath, control: &ControlPath) -> Result<(), MdpError> {
    if path.num_nodes() != control.num_nodes() || path.m() != control.grid_size() {
        return Err(MdpError::GridMismatch(format!(
            "path ({} nodes, M = {}) vs control ({} nodes, M = {})",
            path.num_nodes(),
            path.m(),
            control.num_nodes(),
            control.grid_size()
        )));
    }
    Ok(())
}

/// `B10((F,G,H), (Fh,Gh,Hh))`: the polarized quadratic form of the
/// fluctuation noise along the hydrodynamic path.
pub fn b10(
    model: &RateModel,
    theta: &DensityPath,
    x: &ControlPath,
    y: &ControlPath,
) -> Result<f64, MdpError> {
    check_path_control(theta, x)?;
    check_path_control(theta, y)?;
    let m = theta.m();
    let quad = 1.0 / m as f64;
    let table = CoeffTable::new(model, theta);
    let dt = theta.dt();
    let mut acc = 0.0;
    let mut prev = 0.0;
    for j in 0..theta.num_nodes() {
        let slice = &theta.w[j];
        let p1 = &table.p1[j];
        let fx = x.node(0, j).values();
        let gx = x.node(1, j).values();
        let hx = x.node(2, j).values();
        let fy = y.node(0, j).values();
        let gy = y.node(1, j).values();
        let hy = y.node(2, j).values();
        let mut node = 0.0;
        for u in 0..m {
            node += slice[0][u] * p1[u] * (gx[u] - fx[u]) * (gy[u] - fy[u]);
            node += table.psi[u] * slice[1][u] * (hx[u] - gx[u]) * (hy[u] - gy[u]);
            node += table.phi[u] * slice[2][u] * hx[u] * hy[u];
        }
        node *= quad;
        if j > 0 {
            acc += dt / 2.0 * (prev + node);
        }
        prev = node;
    }
    Ok(acc)
}

/// The diagonal split of `B10(x, x)` into its infection, progression and
/// removal parts `(B4, B5, B6)`.
pub fn b_split(
    model: &RateModel,
    theta: &DensityPath,
    x: &ControlPath,
) -> Result<(f64, f64, f64), MdpError> {
    check_path_control(theta, x)?;
    let m = theta.m();
    let quad = 1.0 / m as f64;
    let table = CoeffTable::new(model, theta);
    let dt = theta.dt();
    let mut acc = [0.0f64; 3];
    let mut prev = [0.0f64; 3];
    for j in 0..theta.num_nodes() {
        let slice = &theta.w[j];
        let p1 = &table.p1[j];
        let f = x.node(0, j).values();
        let g = x.node(1, j).values();
        let h = x.node(2, j).values();
        let mut node = [0.0f64; 3];
        for u in 0..m {
            node[0] += slice[0][u] * p1[u] * (g[u] - f[u]).powi(2);
            node[1] += table.psi[u] * slice[1][u] * (h[u] - g[u]).powi(2);
            node[2] += table.phi[u] * slice[2][u] * h[u] * h[u];
        }
        for k in 0..3 {
            node[k] *= quad;
            if j > 0 {
                acc[k] += dt / 2.0 * (prev[k] + node[k]);
            }
            prev[k] = node[k];
        }
    }
    Ok((acc[0], acc[1], acc[2]))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LinearForms {
    pub l1: f64,
    pub b7: f64,
    pub b8: f64,
    pub b9: f64,
    pub l2: f64,
}

/// Linear pairings `B7, B8, B9` of a signed path `w` against a control
/// triple, and the reduced linear part `l2 = l1 - B7 - B8 - B9`.
pub fn linear_forms(
    model: &RateModel,
    theta: &DensityPath,
    w: &DensityPath,
    x: &ControlPath,
) -> Result<LinearForms, MdpError> {
    check_path_control(theta, x)?;
    check_path_control(w, x)?;
    let m = theta.m();
    let quad = 1.0 / m as f64;
    let table = CoeffTable::new(model, theta);
    let dt = theta.dt();
    let mut acc = [0.0f64; 3];
    let mut prev = [0.0f64; 3];
    for j in 0..theta.num_nodes() {
        let p1 = &table.p1[j];
        let theta_s = &theta.w[j][0];
        let f = x.node(0, j).values();
        let g = x.node(1, j).values();
        let h = x.node(2, j).values();
        let d = &w.w[j];
        // B7 = W_1(P1 (-F+G)) + W_3(P2 (-F+G)).
        let weighted: Vec<f64> = (0..m).map(|u| theta_s[u] * (g[u] - f[u])).collect();
        let p2_diff = model.lambda.apply_left(&weighted);
        let mut node = [0.0f64; 3];
        for u in 0..m {
            node[0] += d[0][u] * p1[u] * (g[u] - f[u]) + d[2][u] * p2_diff[u];
            node[1] += d[1][u] * table.psi[u] * (h[u] - g[u]);
            node[2] -= d[2][u] * table.phi[u] * h[u];
        }
        for k in 0..3 {
            node[k] *= quad;
            if j > 0 {
                acc[k] += dt / 2.0 * (prev[k] + node[k]);
            }
            prev[k] = node[k];
        }
    }
    let l1 = eval_l1(w, x).map_err(|e| MdpError::GridMismatch(e.to_string()))?;
    Ok(LinearForms {
        l1,
        b7: acc[0],
        b8: acc[1],
        b9: acc[2],
        l2: l1 - acc[0] - acc[1] - acc[2],
    })
}

/// The moderate-deviation dynamic functional
/// `J1(W, x) = l2(W, x) - (B4 + B5 + B6)(x) / 2`.
pub fn j1(
    model: &RateModel,
    theta: &DensityPath,
    w: &DensityPath,
    x: &ControlPath,
) -> Result<f64, MdpError> {
    let linear = linear_forms(model, theta, w, x)?;
    let (b4, b5, b6) = b_split(model, theta, x)?;
    Ok(linear.l2 - 0.5 * (b4 + b5 + b6))
}

/// Closed-form initial moderate-deviation rate:
/// `J_ini(h) = (1/2) int [ sum_k h_k^2 / rho_{k-1}
/// + (sum_k h_k)^2 / (1 - sum_k rho_{k-1}) ] du`.
pub fn j_ini_closed_mdp(h: &[Vec<f64>; 3], law: &InitialLaw) -> f64 {
    0.5 * b12(law, h, h)
}

/// The initial-noise inner product
/// `B12(g, h) = int [ sum_k g_k h_k / rho_{k-1}
/// + (sum g)(sum h) / (1 - sum rho) ] du`.
pub fn b12(law: &InitialLaw, g: &[Vec<f64>; 3], h: &[Vec<f64>; 3]) -> f64 {
    let m = law.grid_size();
    let rho = [&law.rho0, &law.rho1, &law.rho2];
    let mut acc = 0.0;
    for x in 0..m {
        let mut node = 0.0;
        let mut sum_g = 0.0;
        let mut sum_h = 0.0;
        let mut sum_rho = 0.0;
        for k in 0..3 {
            node += g[k][x] * h[k][x] / rho[k].values()[x];
            sum_g += g[k][x];
            sum_h += h[k][x];
            sum_rho += rho[k].values()[x];
        }
        acc += node + sum_g * sum_h / (1.0 - sum_rho);
    }
    acc / m as f64
}

/// Variational companion of the initial rate:
/// `J2(pi, f) = sum_k <pi_k, f_k>
/// - (1/2) int [ sum_k rho_{k-1} f_k^2 - (sum_k f_k rho_{k-1})^2 ] du`.
pub fn j2_mdp(law: &InitialLaw, pi: &[Vec<f64>; 3], tests: &[TorusFunction; 3]) -> f64 {
    let m = law.grid_size();
    let rho = [&law.rho0, &law.rho1, &law.rho2];
    let mut linear = 0.0;
    let mut quadratic = 0.0;
    for x in 0..m {
        let mut weighted = 0.0;
        for k in 0..3 {
            let f = tests[k].values()[x];
            linear += pi[k][x] * f;
            quadratic += rho[k].values()[x] * f * f;
            weighted += rho[k].values()[x] * f;
        }
        quadratic -= weighted * weighted;
    }
    (linear - 0.5 * quadratic) / m as f64
}

/// `(R4 g)_k = rho_{k-1} (g_k - sum_l g_l rho_{l-1})`: the initial-noise
/// covariance applied to a function triple.
pub fn r4(law: &InitialLaw, g: &[Vec<f64>; 3]) -> [Vec<f64>; 3] {
    let m = law.grid_size();
    let rho = [&law.rho0, &law.rho1, &law.rho2];
    let weighted: Vec<f64> = (0..m)
        .map(|x| (0..3).map(|l| g[l][x] * rho[l].values()[x]).sum())
        .collect();
    std::array::from_fn(|k| {
        (0..m)
            .map(|x| rho[k].values()[x] * (g[k][x] - weighted[x]))
            .collect()
    })
}

/// A solved skeleton path: the signed density path, its generating data and
/// the dual-method diagnostics.
#[derive(Debug, Clone)]
pub struct SkeletonPath {
    pub path: DensityPath,
    pub tilt: ControlPath,
    pub h_init: [Vec<f64>; 3],
    /// Sup over audit times and probe functions of the direct-vs-Duhamel
    /// pairing discrepancy.
    pub duhamel_discrepancy: f64,
}

/// Source densities of the skeleton equation at time `t` for tilt `(F,G,H)`:
/// `r_1 = -theta_S p1 (G - F)`,
/// `r_2 = +theta_S p1 (G - F) - psi theta_E (H - G)`,
/// `r_3 = +psi theta_E (H - G) + phi theta_I H`.
fn source_density(
    table: &CoeffTable,
    theta: &DensityPath,
    tilt: &ControlPath,
    t: f64,
    out: &mut [Vec<f64>; 3],
) {
    let m = theta.m();
    let coeffs = table.at(t);
    let (j, frac) = theta.locate(t);
    let next = (j + 1).min(theta.num_nodes() - 1);
    for x in 0..m {
        let u = x as f64 / m as f64;
        let f = tilt.eval(0, t, u);
        let g = tilt.eval(1, t, u);
        let h = tilt.eval(2, t, u);
        let theta_e = theta.w[j][1][x] * (1.0 - frac) + theta.w[next][1][x] * frac;
        let theta_i = theta.w[j][2][x] * (1.0 - frac) + theta.w[next][2][x] * frac;
        let infection = coeffs.theta_s[x] * coeffs.p1[x] * (g - f);
        let progression = table.psi[x] * theta_e * (h - g);
        let removal = table.phi[x] * theta_i * h;
        out[0][x] = -infection;
        out[1][x] = infection - progression;
        out[2][x] = progression + removal;
    }
}

/// Solves the skeleton equation `dW/dt = Xi* W + R_t` from the initial
/// densities `h_init` by direct RK4 stepping, then audits the result against
/// the Duhamel representation
/// `<W_t, f> = <W_0, Phi_t^{-1} f> + int_0^t <R_s, Phi_s Phi_t^{-1} f> ds`
/// at several audit times over a fixed probe basis.
pub fn solve_skeleton(
    prop: &Propagator,
    model: &RateModel,
    theta: &DensityPath,
    tilt: &ControlPath,
    h_init: &[Vec<f64>; 3],
) -> Result<SkeletonPath, MdpError> {
    check_path_control(theta, tilt)?;
    let m = theta.m();
    if h_init.iter().any(|h| h.len() != m) {
        return Err(MdpError::GridMismatch("initial densities".into()));
    }
    let table = CoeffTable::new(model, theta);
    let nt = theta.num_nodes();
    let mut d: [Vec<f64>; 3] = h_init.clone();
    let mut w = Vec::with_capacity(nt);
    w.push([d[0].clone(), d[1].clone(), d[2].clone()]);
    let mut scratch: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; m]);
    let mut source: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; m]);
    for j in 0..nt - 1 {
        let t = theta.times[j];
        let h = theta.times[j + 1] - t;
        let mut rhs = |t: f64, d: &[Vec<f64>; 3]| -> [Vec<f64>; 3] {
            let coeffs = table.at(t);
            apply_xi_adjoint_density(model, &coeffs, &table.psi, &table.phi, d, &mut scratch);
            source_density(&table, theta, tilt, t, &mut source);
            std::array::from_fn(|k| {
                (0..m)
                    .map(|x| scratch[k][x] + source[k][x])
                    .collect::<Vec<f64>>()
            })
        };
        let k1 = rhs(t, &d);
        let d1: [Vec<f64>; 3] =
            std::array::from_fn(|k| (0..m).map(|x| d[k][x] + h / 2.0 * k1[k][x]).collect());
        let k2 = rhs(t + h / 2.0, &d1);
        let d2: [Vec<f64>; 3] =
            std::array::from_fn(|k| (0..m).map(|x| d[k][x] + h / 2.0 * k2[k][x]).collect());
        let k3 = rhs(t + h / 2.0, &d2);
        let d3: [Vec<f64>; 3] =
            std::array::from_fn(|k| (0..m).map(|x| d[k][x] + h * k3[k][x]).collect());
        let k4 = rhs(t + h, &d3);
        for k in 0..3 {
            for x in 0..m {
                d[k][x] += h / 6.0 * (k1[k][x] + 2.0 * k2[k][x] + 2.0 * k3[k][x] + k4[k][x]);
            }
        }
        w.push([d[0].clone(), d[1].clone(), d[2].clone()]);
    }
    let path = DensityPath {
        times: theta.times.clone(),
        w,
        provenance: Provenance::Skeleton,
    };

    // Duhamel audit over a deterministic probe basis at a few times.
    let probes = probe_basis(m);
    let audit_nodes: Vec<usize> = (1..=4).map(|k| k * (nt - 1) / 4).collect();
    let quad = 1.0 / m as f64;
    let mut worst = 0.0f64;
    for &node in &audit_nodes {
        for probe in &probes {
            let direct: f64 = (0..3)
                .map(|k| {
                    path.w[node][k]
                        .iter()
                        .zip(&probe[k * m..(k + 1) * m])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * quad
                })
                .sum();
            let duhamel =
                duhamel_pairing(prop, model, &table, theta, tilt, h_init, node, probe);
            worst = worst.max((direct - duhamel).abs());
        }
    }
    if worst > 10.0 * DUHAMEL_TOL {
        return Err(MdpError::MethodsDisagree(worst));
    }
    Ok(SkeletonPath {
        path,
        tilt: tilt.clone(),
        h_init: h_init.clone(),
        duhamel_discrepancy: worst,
    })
}

/// Probe functions for the dual-method audit: low Fourier modes in each
/// component slot plus one mixed triple.
fn probe_basis(m: usize) -> Vec<Vec<f64>> {
    use std::f64::consts::PI;
    let shapes: [fn(f64) -> f64; 3] = [
        |_| 1.0,
        |u| (2.0 * PI * u).cos(),
        |u| (2.0 * PI * u).sin(),
    ];
    let mut out = Vec::new();
    for slot in 0..3 {
        for shape in shapes {
            let mut g = vec![0.0; 3 * m];
            for x in 0..m {
                g[slot * m + x] = shape(x as f64 / m as f64);
            }
            out.push(g);
        }
    }
    let mut mixed = vec![0.0; 3 * m];
    for x in 0..m {
        let u = x as f64 / m as f64;
        mixed[x] = 1.0 + (2.0 * PI * u).sin();
        mixed[m + x] = (4.0 * PI * u).cos();
        mixed[2 * m + x] = 0.5;
    }
    out.push(mixed);
    out
}

/// `<W_t, f>` via the Duhamel representation: the probe is pulled back by
/// `Phi_t^{-1}`, then swept forward against the source densities.
#[allow(clippy::too_many_arguments)]
fn duhamel_pairing(
    prop: &Propagator,
    model: &RateModel,
    table: &CoeffTable,
    theta: &DensityPath,
    tilt: &ControlPath,
    h_init: &[Vec<f64>; 3],
    node: usize,
    probe: &[f64],
) -> f64 {
    let m = prop.m;
    let quad = 1.0 / m as f64;
    let phi_t = prop.matrix_at(model, node);
    let pv = nalgebra::DVector::from_column_slice(probe);
    let g0 = phi_t
        .lu()
        .solve(&pv)
        .expect("propagator stays well conditioned on subintervals");
    let mut v: Vec<f64> = g0.iter().copied().collect();
    let mut acc = 0.0;
    let mut prev = 0.0;
    let mut source: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; m]);
    for j in 0..=node {
        let t = theta.times[j];
        if j > 0 {
            let h = t - theta.times[j - 1];
            v = step_vector(model, table, &v, theta.times[j - 1], h);
        }
        source_density(table, theta, tilt, t, &mut source);
        let node_val: f64 = (0..3)
            .map(|k| {
                source[k]
                    .iter()
                    .zip(&v[k * m..(k + 1) * m])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * quad
            })
            .sum();
        if j > 0 {
            let h = t - theta.times[j - 1];
            acc += h / 2.0 * (prev + node_val);
        }
        prev = node_val;
    }
    let initial: f64 = (0..3)
        .map(|k| {
            h_init[k]
                .iter()
                .zip(&g0.as_slice()[k * m..(k + 1) * m])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                * quad
        })
        .sum();
    initial + acc
}

/// The contraction rate at the pairing constraint `sum_k W_{T,k}(f_k) = x`
/// together with its optimizing initial densities and tilt.
#[derive(Debug, Clone)]
pub struct ContractionRate {
    pub value: f64,
    /// `B12(R4 Phi_T^{-1} f, R4 Phi_T^{-1} f)`.
    pub b12_part: f64,
    /// `B10(f_{Phi,T}, f_{Phi,T})`.
    pub b10_part: f64,
    pub denominator: f64,
    pub optimizer_init: [Vec<f64>; 3],
    pub optimizer_tilt: ControlPath,
}

/// Evaluates the contraction rate
/// `J_contra(x) = (x^2 / 2) / (B12(R4 Phi_T^{-1} f, .) + B10(f_{Phi,T}, .))`.
pub fn j_contra(
    model: &RateModel,
    law: &InitialLaw,
    theta: &DensityPath,
    prop: &Propagator,
    tests: &[TorusFunction; 3],
    x: f64,
) -> Result<ContractionRate, MdpError> {
    let m = prop.m();
    let g = prop.solve_inverse(&stack_tests(tests, m));
    let g_triple: [Vec<f64>; 3] = std::array::from_fn(|k| g[k * m..(k + 1) * m].to_vec());
    let r4_g = r4(law, &g_triple);
    let b12_part = b12(law, &r4_g, &r4_g);
    let family = prop.propagated_family(model, tests);
    let b10_part = b10(model, theta, &family, &family)?;
    let denominator = b12_part + b10_part;
    if denominator.is_nan() || denominator <= 1e-14 {
        return Err(MdpError::DegenerateDenominator(denominator));
    }
    let r = x / denominator;
    let optimizer_init: [Vec<f64>; 3] =
        std::array::from_fn(|k| r4_g[k].iter().map(|v| r * v).collect());
    Ok(ContractionRate {
        value: x * x / (2.0 * denominator),
        b12_part,
        b10_part,
        denominator,
        optimizer_init,
        optimizer_tilt: family.scaled(r),
    })
}

/// Hitting-time rate coefficient: `J_hit(x) = x^2 J_contra(1)
/// (d/dt sum_k mu_{t,k}(f_k) at tau)^2`; the derivative must be strictly
/// positive.
pub fn j_hit(x: f64, j_contra_one: f64, derivative_at_tau: f64) -> Result<f64, MdpError> {
    if derivative_at_tau <= 0.0 {
        return Err(MdpError::NotMonotone(derivative_at_tau));
    }
    Ok(x * x * j_contra_one * derivative_at_tau * derivative_at_tau)
}

/// First time the empirical pairing `sum_k mu^N_{t,k}(f_k)` reaches `c`.
/// Pairings are piecewise constant between events, so the crossing happens
/// at an event time (or at 0); `+inf` when the level is never reached.
pub fn hitting_time_empirical(traj: &Trajectory, tests: &[TorusFunction; 3], c: f64) -> f64 {
    let n = traj.n();
    let fv: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let u = i as f64 / n as f64;
            [tests[0].eval(u), tests[1].eval(u), tests[2].eval(u)]
        })
        .collect();
    let mut value = 0.0;
    for (i, s) in traj.initial.states.iter().enumerate() {
        let k = *s as usize;
        if k < 3 {
            value += fv[i][k];
        }
    }
    value /= n as f64;
    if value >= c {
        return 0.0;
    }
    for e in &traj.events {
        let i = e.vertex as usize;
        let from = e.transition.source() as usize;
        let to = e.transition.target() as usize;
        if from < 3 {
            value -= fv[i][from] / n as f64;
        }
        if to < 3 {
            value += fv[i][to] / n as f64;
        }
        if value >= c {
            return e.time;
        }
    }
    f64::INFINITY
}
