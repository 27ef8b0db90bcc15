//! Model parameters and the torus function algebra shared by all modules.
//!
//! Functions on the torus `[0, 1)` are stored as samples on a uniform grid
//! `u_m = m/M` with linear periodic interpolation between nodes. Quadrature
//! is the periodic trapezoid rule (the rectangle rule on a uniform periodic
//! grid), which is spectrally accurate for smooth periodic integrands.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while validating model inputs.
#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("rate field `{field}` must be strictly positive, found {value} at grid node {node}")]
    NonPositiveRate {
        field: &'static str,
        node: usize,
        value: f64,
    },
    #[error("initial law invalid at node {node}: {reason}")]
    InvalidInitialLaw { node: usize, reason: String },
    #[error("kernel deviates from lambda1*lambda2 by {deviation:e} at grid pair ({i}, {j})")]
    ProductFormMismatch { i: usize, j: usize, deviation: f64 },
    #[error("scaling exponent a = {0} outside the open interval (1/2, 1)")]
    InvalidExponent(f64),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("non-finite sample in `{0}`")]
    NonFinite(&'static str),
}

/// Tolerance for detecting that a sampled kernel is the product of two
/// one-dimensional profiles. Near-misses are hard errors, never silently
/// approximated.
pub const PRODUCT_FORM_TOL: f64 = 1e-10;

/// A real function on the torus `[0, 1)`, stored as samples at `m/M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusFunction {
    values: Vec<f64>,
}

impl TorusFunction {
    /// Wraps raw grid samples. The grid size is `values.len()`.
    pub fn from_samples(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "torus function needs at least one node");
        Self { values }
    }

    /// Samples `f` at the `m` grid nodes `u = i/m`.
    pub fn from_fn(m: usize, f: impl Fn(f64) -> f64) -> Self {
        Self::from_samples((0..m).map(|i| f(i as f64 / m as f64)).collect())
    }

    /// The constant function.
    pub fn constant(m: usize, c: f64) -> Self {
        Self::from_samples(vec![c; m])
    }

    pub fn grid_size(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Evaluates by linear interpolation with periodic wrap of `u` into `[0, 1)`.
    pub fn eval(&self, u: f64) -> f64 {
        let m = self.values.len();
        let x = (u - u.floor()) * m as f64;
        let i = x.floor() as usize % m;
        let frac = x - x.floor();
        let j = (i + 1) % m;
        self.values[i] * (1.0 - frac) + self.values[j] * frac
    }

    /// Periodic trapezoid quadrature of `self` over the torus.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Quadrature of the product `self * g` (shared grid required).
    pub fn inner(&self, g: &TorusFunction) -> Result<f64, ModelError> {
        if self.grid_size() != g.grid_size() {
            return Err(ModelError::GridMismatch(format!(
                "inner product of grids {} and {}",
                self.grid_size(),
                g.grid_size()
            )));
        }
        let m = self.values.len() as f64;
        Ok(self
            .values
            .iter()
            .zip(&g.values)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / m)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn check_finite(&self, name: &'static str) -> Result<(), ModelError> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(name));
        }
        Ok(())
    }
}

/// Evaluates `f` at `u` with periodic wrap; free-function form of
/// [`TorusFunction::eval`].
pub fn eval_periodic(f: &TorusFunction, u: f64) -> f64 {
    f.eval(u)
}

/// The infection kernel: either a verified product `lambda1(u) * lambda2(v)`
/// or general samples on the `M x M` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    Product {
        lambda1: TorusFunction,
        lambda2: TorusFunction,
    },
    Samples {
        /// Row-major `values[i][j] = lambda(i/m, j/m)`.
        values: Vec<Vec<f64>>,
    },
}

impl Kernel {
    pub fn grid_size(&self) -> usize {
        match self {
            Kernel::Product { lambda1, .. } => lambda1.grid_size(),
            Kernel::Samples { values } => values.len(),
        }
    }

    /// Kernel value with bilinear periodic interpolation off the nodes.
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        match self {
            Kernel::Product { lambda1, lambda2 } => lambda1.eval(u) * lambda2.eval(v),
            Kernel::Samples { values } => {
                let m = values.len();
                let x = (u - u.floor()) * m as f64;
                let y = (v - v.floor()) * m as f64;
                let (i, fx) = (x.floor() as usize % m, x - x.floor());
                let (j, fy) = (y.floor() as usize % m, y - y.floor());
                let (i1, j1) = ((i + 1) % m, (j + 1) % m);
                values[i][j] * (1.0 - fx) * (1.0 - fy)
                    + values[i1][j] * fx * (1.0 - fy)
                    + values[i][j1] * (1.0 - fx) * fy
                    + values[i1][j1] * fx * fy
            }
        }
    }

    pub fn is_product(&self) -> bool {
        matches!(self, Kernel::Product { .. })
    }

    /// Sup norm over the grid.
    pub fn sup(&self) -> f64 {
        match self {
            Kernel::Product { lambda1, lambda2 } => {
                let a = lambda1.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let b = lambda2.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                a * b
            }
            Kernel::Samples { values } => values
                .iter()
                .flatten()
                .fold(0.0f64, |m, v| m.max(v.abs())),
        }
    }

    /// `u -> integral lambda(u, v) g(v) dv` by quadrature, as grid samples.
    pub fn apply_right(&self, g: &[f64]) -> Vec<f64> {
        let m = self.grid_size();
        assert_eq!(g.len(), m, "kernel/argument grid mismatch");
        match self {
            Kernel::Product { lambda1, lambda2 } => {
                let pairing = lambda2
                    .values
                    .iter()
                    .zip(g)
                    .map(|(l, w)| l * w)
                    .sum::<f64>()
                    / m as f64;
                lambda1.values.iter().map(|l| l * pairing).collect()
            }
            Kernel::Samples { values } => values
                .iter()
                .map(|row| row.iter().zip(g).map(|(l, w)| l * w).sum::<f64>() / m as f64)
                .collect(),
        }
    }

    /// `v -> integral lambda(u, v) g(u) du` (transposed kernel action).
    pub fn apply_left(&self, g: &[f64]) -> Vec<f64> {
        let m = self.grid_size();
        assert_eq!(g.len(), m, "kernel/argument grid mismatch");
        match self {
            Kernel::Product { lambda1, lambda2 } => {
                let pairing = lambda1
                    .values
                    .iter()
                    .zip(g)
                    .map(|(l, w)| l * w)
                    .sum::<f64>()
                    / m as f64;
                lambda2.values.iter().map(|l| l * pairing).collect()
            }
            Kernel::Samples { values } => (0..m)
                .map(|j| {
                    (0..m)
                        .map(|i| values[i][j] * g[i])
                        .sum::<f64>()
                        / m as f64
                })
                .collect(),
        }
    }
}

/// The spatial rate fields of the chain: infection kernel `lambda`,
/// progression rate `psi` and removal rate `phi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateModel {
    pub lambda: Kernel,
    pub psi: TorusFunction,
    pub phi: TorusFunction,
}

impl RateModel {
    pub fn grid_size(&self) -> usize {
        self.psi.grid_size()
    }

    /// Checks strict positivity of all rate samples and, for sampled kernels
    /// tagged as products, that no sample strays from `lambda1 * lambda2`.
    pub fn validate(&self) -> Result<(), ModelError> {
        let m = self.grid_size();
        if self.phi.grid_size() != m || self.lambda.grid_size() != m {
            return Err(ModelError::GridMismatch(
                "psi, phi and lambda must share one grid".into(),
            ));
        }
        for (field, f) in [("psi", &self.psi), ("phi", &self.phi)] {
            f.check_finite(field)?;
            if let Some((node, &value)) = f.values.iter().enumerate().find(|(_, v)| **v <= 0.0) {
                return Err(ModelError::NonPositiveRate { field, node, value });
            }
        }
        match &self.lambda {
            Kernel::Product { lambda1, lambda2 } => {
                for (field, f) in [("lambda1", lambda1), ("lambda2", lambda2)] {
                    f.check_finite(field)?;
                    if let Some((node, &value)) =
                        f.values.iter().enumerate().find(|(_, v)| **v <= 0.0)
                    {
                        return Err(ModelError::NonPositiveRate { field, node, value });
                    }
                }
            }
            Kernel::Samples { values } => {
                if values.iter().any(|row| row.len() != m) {
                    return Err(ModelError::GridMismatch("kernel rows must have length M".into()));
                }
                for (i, row) in values.iter().enumerate() {
                    for (j, &value) in row.iter().enumerate() {
                        if !value.is_finite() {
                            return Err(ModelError::NonFinite("lambda_kernel"));
                        }
                        if value <= 0.0 {
                            return Err(ModelError::NonPositiveRate {
                                field: "lambda",
                                node: i * m + j,
                                value,
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Verifies that `samples[i][j] == lambda1[i] * lambda2[j]` within
    /// [`PRODUCT_FORM_TOL`], promoting the kernel to product form.
    pub fn verify_product_form(
        samples: &[Vec<f64>],
        lambda1: &TorusFunction,
        lambda2: &TorusFunction,
    ) -> Result<(), ModelError> {
        for (i, row) in samples.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let expected = lambda1.values[i] * lambda2.values[j];
                let deviation = (v - expected).abs();
                if deviation > PRODUCT_FORM_TOL {
                    return Err(ModelError::ProductFormMismatch { i, j, deviation });
                }
            }
        }
        Ok(())
    }
}

/// Initial occupation probabilities per compartment (Assumption on the
/// initial state: independent vertices, strictly positive densities with
/// `rho0 + rho1 + rho2 < 1` everywhere).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialLaw {
    pub rho0: TorusFunction,
    pub rho1: TorusFunction,
    pub rho2: TorusFunction,
}

impl InitialLaw {
    pub fn grid_size(&self) -> usize {
        self.rho0.grid_size()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let m = self.grid_size();
        if self.rho1.grid_size() != m || self.rho2.grid_size() != m {
            return Err(ModelError::GridMismatch("rho fields must share one grid".into()));
        }
        for k in 0..m {
            let (a, b, c) = (self.rho0.values[k], self.rho1.values[k], self.rho2.values[k]);
            for v in [a, b, c] {
                if !v.is_finite() {
                    return Err(ModelError::NonFinite("initial law"));
                }
                if v <= 0.0 {
                    return Err(ModelError::InvalidInitialLaw {
                        node: k,
                        reason: format!("component {v} not strictly positive"),
                    });
                }
            }
            if a + b + c >= 1.0 {
                return Err(ModelError::InvalidInitialLaw {
                    node: k,
                    reason: format!("rho0+rho1+rho2 = {} >= 1", a + b + c),
                });
            }
        }
        Ok(())
    }

    /// Per-vertex state probabilities `(rho0, rho1, rho2, rest)` at `u`.
    pub fn probabilities(&self, u: f64) -> [f64; 4] {
        let a = self.rho0.eval(u);
        let b = self.rho1.eval(u);
        let c = self.rho2.eval(u);
        [a, b, c, 1.0 - a - b - c]
    }
}

/// Moderate-deviation scaling `gamma_N = N^a` with `a` strictly between
/// 1/2 and 1, so that `gamma_N / N -> 0` and `sqrt(N) / gamma_N -> 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingSchedule {
    exponent: f64,
}

impl ScalingSchedule {
    pub fn new(exponent: f64) -> Result<Self, ModelError> {
        if !(exponent > 0.5 && exponent < 1.0) {
            return Err(ModelError::InvalidExponent(exponent));
        }
        Ok(Self { exponent })
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn gamma(&self, n: usize) -> f64 {
        (n as f64).powf(self.exponent)
    }
}

/// A triple `(F, G, H)` of time-space controls on a uniform time grid,
/// linearly interpolated in time and periodically in space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    horizon: f64,
    f: Vec<TorusFunction>,
    g: Vec<TorusFunction>,
    h: Vec<TorusFunction>,
}

impl ControlPath {
    pub fn new(
        horizon: f64,
        f: Vec<TorusFunction>,
        g: Vec<TorusFunction>,
        h: Vec<TorusFunction>,
    ) -> Result<Self, ModelError> {
        if f.len() != g.len() || g.len() != h.len() || f.len() < 2 {
            return Err(ModelError::GridMismatch(
                "control components must share a time grid with >= 2 nodes".into(),
            ));
        }
        let m = f[0].grid_size();
        if f.iter().chain(&g).chain(&h).any(|fun| fun.grid_size() != m) {
            return Err(ModelError::GridMismatch(
                "control components must share one spatial grid".into(),
            ));
        }
        Ok(Self { horizon, f, g, h })
    }

    /// The identically zero control on `steps + 1` time nodes.
    pub fn zero(horizon: f64, steps: usize, m: usize) -> Self {
        let z = vec![TorusFunction::constant(m, 0.0); steps + 1];
        Self::new(horizon, z.clone(), z.clone(), z).expect("zero control is well formed")
    }

    /// Builds from closures sampled on `steps + 1` time nodes.
    pub fn from_fns(
        horizon: f64,
        steps: usize,
        m: usize,
        f: impl Fn(f64, f64) -> f64,
        g: impl Fn(f64, f64) -> f64,
        h: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let dt = horizon / steps as f64;
        let sample = |fun: &dyn Fn(f64, f64) -> f64| {
            (0..=steps)
                .map(|j| TorusFunction::from_fn(m, |u| fun(j as f64 * dt, u)))
                .collect::<Vec<_>>()
        };
        Self::new(horizon, sample(&f), sample(&g), sample(&h)).expect("sampled control grids agree")
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn num_nodes(&self) -> usize {
        self.f.len()
    }

    pub fn grid_size(&self) -> usize {
        self.f[0].grid_size()
    }

    pub fn dt(&self) -> f64 {
        self.horizon / (self.f.len() - 1) as f64
    }

    pub fn node(&self, component: usize, j: usize) -> &TorusFunction {
        match component {
            0 => &self.f[j],
            1 => &self.g[j],
            2 => &self.h[j],
            _ => panic!("control component out of range"),
        }
    }

    /// Time-interpolated evaluation of component `c` (0 = F, 1 = G, 2 = H).
    pub fn eval(&self, component: usize, t: f64, u: f64) -> f64 {
        let (j, frac) = self.locate(t);
        let a = self.node(component, j).eval(u);
        if frac == 0.0 {
            return a;
        }
        let b = self.node(component, j + 1).eval(u);
        a * (1.0 - frac) + b * frac
    }

    /// Index of the time cell containing `t` plus the fractional offset.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let n = self.f.len() - 1;
        let x = (t / self.horizon).clamp(0.0, 1.0) * n as f64;
        let j = (x.floor() as usize).min(n - 1);
        (j, x - j as f64)
    }

    pub fn is_zero(&self) -> bool {
        self.f
            .iter()
            .chain(&self.g)
            .chain(&self.h)
            .all(|fun| fun.values.iter().all(|v| *v == 0.0))
    }

    /// Scales all three components by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let scale = |fs: &[TorusFunction]| {
            fs.iter()
                .map(|f| TorusFunction::from_samples(f.values.iter().map(|v| c * v).collect()))
                .collect::<Vec<_>>()
        };
        Self {
            horizon: self.horizon,
            f: scale(&self.f),
            g: scale(&self.g),
            h: scale(&self.h),
        }
    }

    /// Componentwise sum (shared grids required).
    pub fn add(&self, other: &Self) -> Result<Self, ModelError> {
        if self.num_nodes() != other.num_nodes() || self.grid_size() != other.grid_size() {
            return Err(ModelError::GridMismatch("control paths differ in shape".into()));
        }
        let add = |a: &[TorusFunction], b: &[TorusFunction]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| {
                    TorusFunction::from_samples(
                        x.values.iter().zip(&y.values).map(|(p, q)| p + q).collect(),
                    )
                })
                .collect::<Vec<_>>()
        };
        Self::new(
            self.horizon,
            add(&self.f, &other.f),
            add(&self.g, &other.g),
            add(&self.h, &other.h),
        )
    }

    /// Sup norm over all nodes of all three components.
    pub fn sup(&self) -> f64 {
        self.f
            .iter()
            .chain(&self.g)
            .chain(&self.h)
            .flat_map(|f| f.values.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// A validated (model, initial law, scaling) triple. Construction runs every
/// check; the bundle is immutable afterwards and safe to share across
/// workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    model: RateModel,
    law: InitialLaw,
    schedule: ScalingSchedule,
}

impl ModelBundle {
    pub fn new(
        model: RateModel,
        law: InitialLaw,
        schedule: ScalingSchedule,
    ) -> Result<Self, ModelError> {
        model.validate()?;
        law.validate()?;
        if law.grid_size() != model.grid_size() {
            return Err(ModelError::GridMismatch(
                "initial law and rate model grids differ".into(),
            ));
        }
        Ok(Self { model, law, schedule })
    }

    /// Re-runs validation on an already validated bundle. Idempotent: the
    /// bundle is returned unchanged.
    pub fn validated(self) -> Result<Self, ModelError> {
        Self::new(self.model, self.law, self.schedule)
    }

    pub fn model(&self) -> &RateModel {
        &self.model
    }

    pub fn law(&self) -> &InitialLaw {
        &self.law
    }

    pub fn schedule(&self) -> &ScalingSchedule {
        &self.schedule
    }

    pub fn grid_size(&self) -> usize {
        self.model.grid_size()
    }
}

/// A measure on the torus for pairing purposes: either a grid density
/// (paired by quadrature) or a finite list of weighted atoms (paired by
/// exact summation).
#[derive(Debug, Clone)]
pub enum Measure<'a> {
    Density(&'a TorusFunction),
    /// `(position, mass)` pairs.
    Atoms(&'a [(f64, f64)]),
}

impl Measure<'_> {
    /// Pairs the measure with a continuous function.
    pub fn pair(&self, f: &TorusFunction) -> f64 {
        match self {
            Measure::Density(d) => d.inner(f).expect("density pairing grid mismatch"),
            Measure::Atoms(atoms) => atoms.iter().map(|(x, w)| w * f.eval(*x)).sum(),
        }
    }

    pub fn total_mass(&self) -> f64 {
        match self {
            Measure::Density(d) => d.integral(),
            Measure::Atoms(atoms) => atoms.iter().map(|(_, w)| w).sum(),
        }
    }
}

/// `integral integral h(u, v) nu1(du) nu2(dv)`: exact summation over atoms,
/// quadrature over densities. Product kernels factorize exactly into
/// `nu1(lambda1) * nu2(lambda2)`.
pub fn pair_product(nu1: &Measure, nu2: &Measure, h: &Kernel) -> Result<f64, ModelError> {
    if let Kernel::Product { lambda1, lambda2 } = h {
        return Ok(nu1.pair(lambda1) * nu2.pair(lambda2));
    }
    let m = h.grid_size();
    let check = |d: &TorusFunction| -> Result<(), ModelError> {
        if d.grid_size() != m {
            return Err(ModelError::GridMismatch(format!(
                "kernel grid {m} vs density grid {}",
                d.grid_size()
            )));
        }
        Ok(())
    };
    match (nu1, nu2) {
        (Measure::Density(d1), Measure::Density(d2)) => {
            check(d1)?;
            check(d2)?;
            let Kernel::Samples { values } = h else { unreachable!() };
            let mut acc = 0.0;
            for (i, row) in values.iter().enumerate() {
                let mut inner = 0.0;
                for (j, v) in row.iter().enumerate() {
                    inner += v * d2.values[j];
                }
                acc += d1.values[i] * inner;
            }
            Ok(acc / (m * m) as f64)
        }
        (Measure::Atoms(atoms), Measure::Density(d2)) => {
            check(d2)?;
            let mut acc = 0.0;
            for (x, w) in atoms.iter() {
                let mut inner = 0.0;
                for (j, dv) in d2.values.iter().enumerate() {
                    inner += h.eval(*x, j as f64 / m as f64) * dv;
                }
                acc += w * inner / m as f64;
            }
            Ok(acc)
        }
        (Measure::Density(d1), Measure::Atoms(atoms)) => {
            check(d1)?;
            let mut acc = 0.0;
            for (y, w) in atoms.iter() {
                let mut inner = 0.0;
                for (i, dv) in d1.values.iter().enumerate() {
                    inner += h.eval(i as f64 / m as f64, *y) * dv;
                }
                acc += w * inner / m as f64;
            }
            Ok(acc)
        }
        (Measure::Atoms(a1), Measure::Atoms(a2)) => Ok(a1
            .iter()
            .map(|(x, wx)| {
                a2.iter()
                    .map(|(y, wy)| wy * h.eval(*x, *y))
                    .sum::<f64>()
                    * wx
            })
            .sum()),
    }
}
