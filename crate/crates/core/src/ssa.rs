//! Exact event-driven simulation of the `N`-vertex SEIR chain.
//!
//! Sampling follows the competing-clocks scheme: per-category total rates are
//! maintained incrementally, the next event time is exponential in the total,
//! and the jumping vertex is drawn from a balanced partial-sum tree in
//! `O(log N)`. Under a product-form kernel the susceptible pressure
//! aggregates to `lambda1(i/N) * (1/N) sum_{j infected} lambda2(j/N)`; general
//! kernels fall back to per-vertex cached pressure with an `O(N)` update on
//! each change of the infected set.
//!
//! The time-inhomogeneous tilted variant uses Poisson thinning against a
//! per-cell rate majorant, which keeps the realization statistically exact
//! for time-dependent rates.

use crate::model::{ControlPath, InitialLaw, Kernel, RateModel};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Vertex compartments, encoded as the chain's state digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum State {
    Susceptible = 0,
    Exposed = 1,
    Infected = 2,
    Removed = 3,
}

impl State {
    pub fn from_u8(v: u8) -> Self {
        match v {
            0 => State::Susceptible,
            1 => State::Exposed,
            2 => State::Infected,
            3 => State::Removed,
            _ => panic!("invalid state {v}"),
        }
    }
}

/// The three allowed per-vertex transitions, in compartment order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transition {
    /// S -> E
    Exposure,
    /// E -> I
    Progression,
    /// I -> R
    Removal,
}

impl Transition {
    pub fn source(self) -> State {
        match self {
            Transition::Exposure => State::Susceptible,
            Transition::Progression => State::Exposed,
            Transition::Removal => State::Infected,
        }
    }

    pub fn target(self) -> State {
        match self {
            Transition::Exposure => State::Exposed,
            Transition::Progression => State::Infected,
            Transition::Removal => State::Removed,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Transition::Exposure => "S->E",
            Transition::Progression => "E->I",
            Transition::Removal => "I->R",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "S->E" => Some(Transition::Exposure),
            "E->I" => Some(Transition::Progression),
            "I->R" => Some(Transition::Removal),
            _ => None,
        }
    }
}

/// Full assignment of compartments to the `N` vertices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Configuration {
    pub states: Vec<State>,
}

impl Configuration {
    pub fn n(&self) -> usize {
        self.states.len()
    }

    pub fn counts(&self) -> [usize; 4] {
        let mut c = [0usize; 4];
        for s in &self.states {
            c[*s as usize] += 1;
        }
        c
    }
}

/// One recorded jump of the chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub vertex: u32,
    pub transition: Transition,
}

/// An exact event log of one realization on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub initial: Configuration,
    pub events: Vec<Event>,
    pub horizon: f64,
}

impl Trajectory {
    pub fn n(&self) -> usize {
        self.initial.n()
    }

    pub fn final_configuration(&self) -> Configuration {
        let mut config = self.initial.clone();
        for e in &self.events {
            config.states[e.vertex as usize] = e.transition.target();
        }
        config
    }

    /// Checks the structural invariants of an event log: strictly increasing
    /// times in `(0, horizon]` and the per-vertex transition order.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.events.len() > 3 * self.n() {
            return Err(format!("{} events exceed 3N", self.events.len()));
        }
        let mut last = 0.0;
        let mut states = self.initial.states.clone();
        for e in &self.events {
            if e.time <= last || e.time > self.horizon {
                return Err(format!("event time {} out of order", e.time));
            }
            last = e.time;
            let s = states[e.vertex as usize];
            if s != e.transition.source() {
                return Err(format!(
                    "vertex {} in state {:?} cannot take {:?}",
                    e.vertex, s, e.transition
                ));
            }
            states[e.vertex as usize] = e.transition.target();
        }
        Ok(())
    }
}

/// Deterministic RNG stream for replica `stream` of experiment `seed`.
/// Parallel and serial execution of the same replica set draw identical
/// per-replica streams.
pub fn replica_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Samples an i.i.d. initial configuration: vertex `i` takes states
/// `0,1,2,3` with probabilities `rho0(i/N), rho1(i/N), rho2(i/N), 1 - sum`.
pub fn sample_initial(law: &InitialLaw, n: usize, seed: u64) -> Configuration {
    sample_initial_with_rng(law, n, &mut replica_rng(seed, 0))
}

pub fn sample_initial_with_rng(law: &InitialLaw, n: usize, rng: &mut impl Rng) -> Configuration {
    let states = (0..n)
        .map(|i| {
            let p = law.probabilities(i as f64 / n as f64);
            let u: f64 = rng.gen();
            if u < p[0] {
                State::Susceptible
            } else if u < p[0] + p[1] {
                State::Exposed
            } else if u < p[0] + p[1] + p[2] {
                State::Infected
            } else {
                State::Removed
            }
        })
        .collect();
    Configuration { states }
}

/// Fenwick tree over per-vertex weights supporting prefix-sum sampling and
/// point updates in `O(log N)`.
#[derive(Debug, Clone)]
struct WeightTree {
    tree: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightTree {
    fn new(weights: Vec<f64>) -> Self {
        let mut t = Self {
            tree: vec![0.0; weights.len() + 1],
            weights,
        };
        t.rebuild();
        t
    }

    fn rebuild(&mut self) {
        self.tree.iter_mut().for_each(|v| *v = 0.0);
        let n = self.weights.len();
        for i in 0..n {
            let w = self.weights[i];
            let mut j = i + 1;
            while j <= n {
                self.tree[j] += w;
                j += j & j.wrapping_neg();
            }
        }
    }

    fn set(&mut self, i: usize, w: f64) {
        let delta = w - self.weights[i];
        self.weights[i] = w;
        let mut j = i + 1;
        while j < self.tree.len() {
            self.tree[j] += delta;
            j += j & j.wrapping_neg();
        }
    }

    fn total(&self) -> f64 {
        let mut acc = 0.0;
        let mut j = self.weights.len();
        while j > 0 {
            acc += self.tree[j];
            j -= j & j.wrapping_neg();
        }
        acc
    }

    /// First index whose weight prefix exceeds `x` (requires `0 <= x < total`).
    fn sample(&self, mut x: f64) -> usize {
        let n = self.weights.len();
        let mut pos = 0usize;
        let mut mask = n.next_power_of_two();
        while mask > 0 {
            let next = pos + mask;
            if next <= n && self.tree[next] <= x {
                x -= self.tree[next];
                pos = next;
            }
            mask >>= 1;
        }
        // Skip any zero-weight slot the floating-point search may land on.
        let mut idx = pos.min(n - 1);
        while idx + 1 < n && self.weights[idx] <= 0.0 {
            idx += 1;
        }
        idx
    }
}

/// Incremental susceptible-pressure bookkeeping for the infection channel.
enum InfectionIndex {
    /// Assumption-(B) fast path: tree over `lambda1` weights of susceptibles
    /// plus the scalar aggregate `sum_{j infected} lambda2(j/N)`.
    Product {
        lam1: Vec<f64>,
        lam2: Vec<f64>,
        tree: WeightTree,
        infected_lam2: f64,
    },
    /// General kernel: cached pressure `(1/N) sum_{j infected} lambda(u_i, u_j)`
    /// per vertex, `O(N)` to refresh on each infected-set change.
    Generic {
        /// `rate[i][j] = lambda(i/N, j/N) / N`
        rate: Vec<Vec<f64>>,
        pressure: Vec<f64>,
        susceptible_pressure: f64,
    },
}

impl InfectionIndex {
    fn new(model: &RateModel, states: &[State]) -> Self {
        let n = states.len();
        match &model.lambda {
            Kernel::Product { lambda1, lambda2 } => {
                let lam1: Vec<f64> = (0..n).map(|i| lambda1.eval(i as f64 / n as f64)).collect();
                let lam2: Vec<f64> = (0..n).map(|i| lambda2.eval(i as f64 / n as f64)).collect();
                let weights = (0..n)
                    .map(|i| if states[i] == State::Susceptible { lam1[i] } else { 0.0 })
                    .collect();
                let infected_lam2 = (0..n)
                    .filter(|&j| states[j] == State::Infected)
                    .map(|j| lam2[j])
                    .sum();
                InfectionIndex::Product {
                    lam1,
                    lam2,
                    tree: WeightTree::new(weights),
                    infected_lam2,
                }
            }
            kernel => {
                let rate: Vec<Vec<f64>> = (0..n)
                    .map(|i| {
                        (0..n)
                            .map(|j| kernel.eval(i as f64 / n as f64, j as f64 / n as f64) / n as f64)
                            .collect()
                    })
                    .collect();
                let mut index = InfectionIndex::Generic {
                    rate,
                    pressure: vec![0.0; n],
                    susceptible_pressure: 0.0,
                };
                index.rebuild(states);
                index
            }
        }
    }

    /// Total S -> E rate of the current configuration.
    fn total(&self, n: usize) -> f64 {
        match self {
            InfectionIndex::Product { tree, infected_lam2, .. } => {
                tree.total() * infected_lam2 / n as f64
            }
            InfectionIndex::Generic { susceptible_pressure, .. } => *susceptible_pressure,
        }
    }

    /// Draws the infected susceptible given a uniform `x` in `[0, total)`.
    fn sample(&self, states: &[State], x: f64, n: usize) -> usize {
        match self {
            InfectionIndex::Product { tree, infected_lam2, .. } => {
                tree.sample(x * n as f64 / infected_lam2)
            }
            InfectionIndex::Generic { pressure, .. } => {
                let mut acc = 0.0;
                let mut fallback = None;
                for i in 0..n {
                    if states[i] == State::Susceptible && pressure[i] > 0.0 {
                        fallback = Some(i);
                        acc += pressure[i];
                        if acc > x {
                            return i;
                        }
                    }
                }
                fallback.expect("sampled infection with zero total pressure")
            }
        }
    }

    fn apply(&mut self, states: &[State], vertex: usize, transition: Transition) {
        match self {
            InfectionIndex::Product { lam2, tree, infected_lam2, .. } => match transition {
                Transition::Exposure => tree.set(vertex, 0.0),
                Transition::Progression => *infected_lam2 += lam2[vertex],
                Transition::Removal => *infected_lam2 -= lam2[vertex],
            },
            InfectionIndex::Generic { rate, pressure, susceptible_pressure } => match transition {
                Transition::Exposure => *susceptible_pressure -= pressure[vertex],
                Transition::Progression | Transition::Removal => {
                    let sign = if transition == Transition::Progression { 1.0 } else { -1.0 };
                    for i in 0..states.len() {
                        let r = sign * rate[i][vertex];
                        pressure[i] += r;
                        if states[i] == State::Susceptible {
                            *susceptible_pressure += r;
                        }
                    }
                }
            },
        }
    }

    fn rebuild(&mut self, states: &[State]) {
        let n = states.len();
        match self {
            InfectionIndex::Product { lam1, lam2, tree, infected_lam2 } => {
                for i in 0..n {
                    tree.weights[i] = if states[i] == State::Susceptible { lam1[i] } else { 0.0 };
                }
                tree.rebuild();
                *infected_lam2 = (0..n)
                    .filter(|&j| states[j] == State::Infected)
                    .map(|j| lam2[j])
                    .sum();
            }
            InfectionIndex::Generic { rate, pressure, susceptible_pressure } => {
                let infected: Vec<usize> =
                    (0..n).filter(|&j| states[j] == State::Infected).collect();
                for i in 0..n {
                    pressure[i] = infected.iter().map(|&j| rate[i][j]).sum();
                }
                *susceptible_pressure = (0..n)
                    .filter(|&i| states[i] == State::Susceptible)
                    .map(|i| pressure[i])
                    .sum();
            }
        }
    }
}

/// Number of events between from-scratch aggregate audits.
const AUDIT_PERIOD: usize = 10_000;

/// Relative tolerance of the incremental-vs-recomputed aggregate audit.
pub const AUDIT_REL_TOL: f64 = 1e-9;

pub(crate) struct Engine {
    pub states: Vec<State>,
    infection: InfectionIndex,
    progression: WeightTree,
    removal: WeightTree,
    events_since_audit: usize,
    pub max_audit_drift: f64,
}

impl Engine {
    pub fn new(model: &RateModel, init: &Configuration) -> Self {
        let n = init.n();
        let states = init.states.clone();
        let psi: Vec<f64> = (0..n).map(|i| model.psi.eval(i as f64 / n as f64)).collect();
        let phi: Vec<f64> = (0..n).map(|i| model.phi.eval(i as f64 / n as f64)).collect();
        let progression = WeightTree::new(
            (0..n)
                .map(|i| if states[i] == State::Exposed { psi[i] } else { 0.0 })
                .collect(),
        );
        let removal = WeightTree::new(
            (0..n)
                .map(|i| if states[i] == State::Infected { phi[i] } else { 0.0 })
                .collect(),
        );
        let infection = InfectionIndex::new(model, &states);
        Self {
            states,
            infection,
            progression,
            removal,
            events_since_audit: 0,
            max_audit_drift: 0.0,
        }
    }

    fn n(&self) -> usize {
        self.states.len()
    }

    pub fn category_rates(&self) -> [f64; 3] {
        [
            self.infection.total(self.n()),
            self.progression.total(),
            self.removal.total(),
        ]
    }

    pub fn sample_vertex(&self, category: usize, x: f64) -> usize {
        match category {
            0 => self.infection.sample(&self.states, x, self.n()),
            1 => self.progression.sample(x),
            _ => self.removal.sample(x),
        }
    }

    pub fn apply(&mut self, model: &RateModel, vertex: usize, transition: Transition) {
        debug_assert_eq!(self.states[vertex], transition.source());
        let n = self.n();
        let u = vertex as f64 / n as f64;
        self.infection.apply(&self.states, vertex, transition);
        match transition {
            Transition::Exposure => {
                self.progression.set(vertex, model.psi.eval(u));
            }
            Transition::Progression => {
                self.progression.set(vertex, 0.0);
                self.removal.set(vertex, model.phi.eval(u));
            }
            Transition::Removal => {
                self.removal.set(vertex, 0.0);
            }
        }
        self.states[vertex] = transition.target();
        self.events_since_audit += 1;
        if self.events_since_audit >= AUDIT_PERIOD {
            self.audit();
        }
    }

    /// Recomputes the maintained aggregates from scratch and rebuilds them,
    /// recording the worst relative drift observed.
    pub fn audit(&mut self) -> f64 {
        self.events_since_audit = 0;
        let before = self.infection.total(self.n());
        self.infection.rebuild(&self.states);
        let after = self.infection.total(self.n());
        let scale = after.abs().max(1e-300);
        let drift = (before - after).abs() / scale;
        self.max_audit_drift = self.max_audit_drift.max(drift);
        debug_assert!(
            drift <= AUDIT_REL_TOL,
            "infection aggregate drifted by {drift:e}"
        );
        drift
    }
}

/// Exact realization of the chain started from `init` over `[0, horizon]`.
///
/// With `tilt = Some(controls)` the per-event rates acquire the factors
/// `exp(-F_t + G_t)` (infection), `exp(-G_t + H_t)` (progression) and
/// `exp(-H_t)` (removal), evaluated at the jumping vertex's position, and the
/// engine switches to Poisson thinning. `tilt = None` disables thinning
/// entirely, so two runs with equal seeds are event-for-event identical.
pub fn simulate(
    model: &RateModel,
    init: &Configuration,
    horizon: f64,
    seed: u64,
    tilt: Option<&ControlPath>,
) -> Trajectory {
    simulate_with_rng(model, init, horizon, &mut replica_rng(seed, 1), tilt)
}

pub fn simulate_with_rng(
    model: &RateModel,
    init: &Configuration,
    horizon: f64,
    rng: &mut impl Rng,
    tilt: Option<&ControlPath>,
) -> Trajectory {
    let mut engine = Engine::new(model, init);
    let events = match tilt {
        None => run_plain(model, &mut engine, horizon, rng),
        Some(controls) => run_thinned(model, &mut engine, horizon, rng, controls),
    };
    Trajectory {
        initial: init.clone(),
        events,
        horizon,
    }
}

fn run_plain(
    model: &RateModel,
    engine: &mut Engine,
    horizon: f64,
    rng: &mut impl Rng,
) -> Vec<Event> {
    let mut events = Vec::new();
    let mut t = 0.0;
    loop {
        let [r1, r2, r3] = engine.category_rates();
        let total = r1 + r2 + r3;
        if total <= 0.0 {
            break;
        }
        t += exp_draw(rng) / total;
        if t > horizon {
            break;
        }
        let x: f64 = rng.gen::<f64>() * total;
        let (category, offset) = if x < r1 {
            (0, x)
        } else if x < r1 + r2 {
            (1, x - r1)
        } else {
            (2, x - r1 - r2)
        };
        let vertex = engine.sample_vertex(category, offset);
        let transition = match category {
            0 => Transition::Exposure,
            1 => Transition::Progression,
            _ => Transition::Removal,
        };
        engine.apply(model, vertex, transition);
        events.push(Event {
            time: t,
            vertex: vertex as u32,
            transition,
        });
    }
    events
}

fn run_thinned(
    model: &RateModel,
    engine: &mut Engine,
    horizon: f64,
    rng: &mut impl Rng,
    controls: &ControlPath,
) -> Vec<Event> {
    assert!(
        controls.horizon() >= horizon - 1e-12,
        "tilt must be defined on the whole simulation horizon"
    );
    let majorants = CellMajorants::new(controls);
    let mut events = Vec::new();
    let mut t = 0.0;
    let mut cell = 0usize;
    let cells = controls.num_nodes() - 1;
    let dt = controls.dt();
    while t < horizon {
        let cell_end = if cell + 1 >= cells { horizon } else { ((cell + 1) as f64 * dt).min(horizon) };
        let g_hat = majorants.cell(cell);
        loop {
            let [r1, r2, r3] = engine.category_rates();
            let bound = r1 * g_hat[0] + r2 * g_hat[1] + r3 * g_hat[2];
            if bound <= 0.0 {
                t = cell_end;
                break;
            }
            let candidate = t + exp_draw(rng) / bound;
            if candidate >= cell_end {
                t = cell_end;
                break;
            }
            t = candidate;
            let x: f64 = rng.gen::<f64>() * bound;
            let (category, offset, untilted) = if x < r1 * g_hat[0] {
                (0, x / g_hat[0], r1)
            } else if x < r1 * g_hat[0] + r2 * g_hat[1] {
                (1, (x - r1 * g_hat[0]) / g_hat[1], r2)
            } else {
                (2, (x - r1 * g_hat[0] - r2 * g_hat[1]) / g_hat[2], r3)
            };
            debug_assert!(offset < untilted * (1.0 + 1e-12));
            let vertex = engine.sample_vertex(category, offset.min(untilted));
            let u = vertex as f64 / engine.n() as f64;
            let exponent = match category {
                0 => -controls.eval(0, t, u) + controls.eval(1, t, u),
                1 => -controls.eval(1, t, u) + controls.eval(2, t, u),
                _ => -controls.eval(2, t, u),
            };
            let accept = exponent.exp() / g_hat[category];
            debug_assert!(accept <= 1.0 + 1e-12, "thinning majorant violated: {accept}");
            if rng.gen::<f64>() < accept {
                let transition = match category {
                    0 => Transition::Exposure,
                    1 => Transition::Progression,
                    _ => Transition::Removal,
                };
                engine.apply(model, vertex, transition);
                events.push(Event {
                    time: t,
                    vertex: vertex as u32,
                    transition,
                });
            }
        }
        cell += 1;
        if cell >= cells {
            // Controls are defined on [0, horizon]; the simulation horizon
            // cannot exceed the control horizon by contract.
            break;
        }
    }
    events
}

/// Per-control-cell majorants of the three tilt factors. The interpolated
/// exponent is linear in time and space, so its maximum over a cell is
/// attained at a (time-boundary, grid-node) corner.
struct CellMajorants {
    per_cell: Vec<[f64; 3]>,
}

impl CellMajorants {
    fn new(controls: &ControlPath) -> Self {
        let cells = controls.num_nodes() - 1;
        let m = controls.grid_size();
        let mut per_cell = Vec::with_capacity(cells);
        for j in 0..cells {
            let mut worst = [f64::NEG_INFINITY; 3];
            for node in [j, j + 1] {
                let f = controls.node(0, node).values();
                let g = controls.node(1, node).values();
                let h = controls.node(2, node).values();
                for i in 0..m {
                    worst[0] = worst[0].max(-f[i] + g[i]);
                    worst[1] = worst[1].max(-g[i] + h[i]);
                    worst[2] = worst[2].max(-h[i]);
                }
            }
            per_cell.push([worst[0].exp(), worst[1].exp(), worst[2].exp()]);
        }
        Self { per_cell }
    }

    fn cell(&self, j: usize) -> [f64; 3] {
        self.per_cell[j.min(self.per_cell.len() - 1)]
    }
}

fn exp_draw(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen();
    -(1.0 - u).ln()
}
