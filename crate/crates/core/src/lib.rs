//! Simulation and verification laboratory for stochastic SEIR epidemics on
//! complete graphs with vertex-dependent transition rates.
//!
//! The crate is organised around the objects the theory manipulates:
//!
//! * [`model`] — rate fields on the torus, initial laws, scaling schedules,
//!   measure pairings and quadrature.
//! * [`ssa`] — exact event-driven simulation of the `N`-vertex chain,
//!   including the time-inhomogeneous exponentially tilted variant.
//! * [`fields`] — empirical density fields, centered fluctuation fields and
//!   Dynkin martingale residuals extracted from event logs.
//! * [`oracle`] — dense CTMC ground truth on the full `4^N` state space for
//!   small `N` via uniformization.
//! * [`hydro`] — the hydrodynamic and tilted density ODE systems, limit
//!   admissibility checks and limit hitting times.
//! * [`ldp`] — large-deviation functionals, their closed forms on admissible
//!   paths, and the exponential-martingale Monte-Carlo identity.
//! * [`mdp`] — moderate-deviation quadratic forms, the linearized propagator,
//!   skeleton paths and hitting-time rate coefficients.
//! * [`experiment`] — reproducible batch experiments backing the verification
//!   suite, with CSV/JSON persistence.

pub mod experiment;
pub mod fields;
pub mod hydro;
pub mod io;
pub mod ldp;
pub mod mdp;
pub mod model;
pub mod oracle;
pub mod ssa;

pub use model::{ControlPath, InitialLaw, ModelBundle, RateModel, ScalingSchedule, TorusFunction};
