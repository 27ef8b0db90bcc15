//! Empirical density fields, centered fluctuation fields and Dynkin
//! martingale residuals extracted from exact event logs.
//!
//! Pairings are atomic sums `mu_{t,k}(f) = (1/N) sum_i 1{state} f(i/N)` with
//! no binning error; optional grid densities from histogram binning carry an
//! `O(1/M)` bias and are flagged as such.

use crate::hydro::DensityPath;
use crate::model::{Kernel, RateModel, ScalingSchedule, TorusFunction};
use crate::ssa::{State, Trajectory};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldsError {
    #[error("centering unavailable: {0}")]
    CenteringUnavailable(String),
    #[error("sample times must be sorted and within [0, horizon]")]
    BadSampleTimes,
}

/// Time-sampled pairings of the empirical fields against test functions.
#[derive(Debug, Clone)]
pub struct EmpiricalPath {
    pub times: Vec<f64>,
    /// `pairings[test][k][time]` holds `mu^N_{t,k+1}(f_test)`.
    pub pairings: Vec<[Vec<f64>; 3]>,
}

/// Centering mean used when building fluctuation fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CenteringMode {
    ReplicaMean,
    OracleMean,
    HydrodynamicMean,
}

/// Per-vertex occupation means `E 1{xi_t(i) = k}` on a time grid, as
/// produced by the exact oracle.
#[derive(Debug, Clone)]
pub struct VertexMeans {
    pub times: Vec<f64>,
    /// `means[time][k][vertex]` for compartments k = 0, 1, 2 (S, E, I).
    pub means: Vec<[Vec<f64>; 3]>,
}

/// Requested centering for [`fluctuation_pairings`].
#[derive(Debug, Clone, Copy)]
pub enum Centering<'a> {
    /// Subtract the across-replica mean; exact zero-mean by construction.
    ReplicaMean,
    /// Subtract exact per-vertex expectations (small `N` only).
    OracleMean(&'a VertexMeans),
    /// Subtract the hydrodynamic density at each vertex position. Differs
    /// from exact-expectation centering by `O(1/gamma_N)`.
    HydrodynamicMean(&'a DensityPath),
}

/// One replica's fluctuation pairings.
#[derive(Debug, Clone)]
pub struct FluctuationPath {
    pub times: Vec<f64>,
    /// `values[test][k][time]` holds `eta^N_{t,k+1}(f_test)`.
    pub values: Vec<[Vec<f64>; 3]>,
    pub centering: CenteringMode,
    /// Set when the centering mean is itself an `O(1/gamma_N)`-biased proxy
    /// for the exact expectation.
    pub centering_bias_o_inv_gamma: bool,
}

fn check_times(times: &[f64], horizon: f64) -> Result<(), FieldsError> {
    let sorted = times.windows(2).all(|w| w[0] <= w[1]);
    let in_range = times.iter().all(|t| (0.0..=horizon).contains(t));
    if !sorted || !in_range || times.is_empty() {
        return Err(FieldsError::BadSampleTimes);
    }
    Ok(())
}

/// Raw per-test sums `sum_i 1{state_i = k} f(i/N)` sampled at `times`
/// (so `N * mu_{t,k}(f)`), by a single sweep of the event log.
fn raw_sums(traj: &Trajectory, test_values: &[Vec<f64>], times: &[f64]) -> Vec<[Vec<f64>; 3]> {
    let n_tests = test_values.len();
    let mut sums = vec![[0.0f64; 3]; n_tests];
    let mut states = traj.initial.states.clone();
    for (s, vals) in sums.iter_mut().zip(test_values) {
        for (i, st) in states.iter().enumerate() {
            let k = *st as usize;
            if k < 3 {
                s[k] += vals[i];
            }
        }
    }
    let mut out: Vec<[Vec<f64>; 3]> =
        vec![[Vec::with_capacity(times.len()), Vec::with_capacity(times.len()), Vec::with_capacity(times.len())]; n_tests];
    let mut ev = 0usize;
    for &t in times {
        while ev < traj.events.len() && traj.events[ev].time <= t {
            let e = &traj.events[ev];
            let i = e.vertex as usize;
            let from = e.transition.source() as usize;
            let to = e.transition.target() as usize;
            for (s, vals) in sums.iter_mut().zip(test_values) {
                if from < 3 {
                    s[from] -= vals[i];
                }
                if to < 3 {
                    s[to] += vals[i];
                }
            }
            states[i] = e.transition.target();
            ev += 1;
        }
        for (o, s) in out.iter_mut().zip(&sums) {
            for k in 0..3 {
                o[k].push(s[k]);
            }
        }
    }
    out
}

fn test_values(tests: &[TorusFunction], n: usize) -> Vec<Vec<f64>> {
    tests
        .iter()
        .map(|f| (0..n).map(|i| f.eval(i as f64 / n as f64)).collect())
        .collect()
}

/// Exact pairings `mu^N_{t,k}(f)` of one trajectory at the sample times.
pub fn empirical_pairings(
    traj: &Trajectory,
    tests: &[TorusFunction],
    times: &[f64],
) -> Result<EmpiricalPath, FieldsError> {
    check_times(times, traj.horizon)?;
    let n = traj.n();
    let tv = test_values(tests, n);
    let raw = raw_sums(traj, &tv, times);
    let pairings = raw
        .into_iter()
        .map(|mut per_test| {
            for k in &mut per_test {
                for v in k.iter_mut() {
                    *v /= n as f64;
                }
            }
            per_test
        })
        .collect();
    Ok(EmpiricalPath {
        times: times.to_vec(),
        pairings,
    })
}

/// Histogram-binned grid densities of the empirical fields at the sample
/// times: `densities[time][k][cell]`. Binning carries an `O(1/M)` bias
/// relative to the atomic pairings.
pub fn empirical_densities(
    traj: &Trajectory,
    m: usize,
    times: &[f64],
) -> Result<Vec<[Vec<f64>; 3]>, FieldsError> {
    check_times(times, traj.horizon)?;
    let n = traj.n();
    let mut states = traj.initial.states.clone();
    let cell_of = |i: usize| ((i as f64 / n as f64) * m as f64).floor() as usize % m;
    let mut ev = 0usize;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        while ev < traj.events.len() && traj.events[ev].time <= t {
            let e = &traj.events[ev];
            states[e.vertex as usize] = e.transition.target();
            ev += 1;
        }
        let mut hist = [vec![0.0f64; m], vec![0.0f64; m], vec![0.0f64; m]];
        for (i, st) in states.iter().enumerate() {
            let k = *st as usize;
            if k < 3 {
                hist[k][cell_of(i)] += m as f64 / n as f64;
            }
        }
        out.push(hist);
    }
    Ok(out)
}

/// Builds fluctuation pairings `eta^N_{t,k}(f)` for a set of replicas under
/// the requested centering.
pub fn fluctuation_pairings(
    replicas: &[Trajectory],
    tests: &[TorusFunction],
    times: &[f64],
    schedule: &ScalingSchedule,
    centering: Centering,
) -> Result<Vec<FluctuationPath>, FieldsError> {
    if replicas.is_empty() {
        return Err(FieldsError::CenteringUnavailable("no replicas".into()));
    }
    let n = replicas[0].n();
    check_times(times, replicas[0].horizon)?;
    let gamma = schedule.gamma(n);
    let tv = test_values(tests, n);
    let raw: Vec<Vec<[Vec<f64>; 3]>> = replicas
        .iter()
        .map(|traj| raw_sums(traj, &tv, times))
        .collect();

    // centers[test][k][time] = sum_i m_{t,k}(i) f(i/N)
    let centers: Vec<[Vec<f64>; 3]> = match centering {
        Centering::ReplicaMean => {
            if replicas.len() < 2 {
                return Err(FieldsError::CenteringUnavailable(
                    "replica-mean centering needs at least 2 replicas".into(),
                ));
            }
            let r = replicas.len() as f64;
            (0..tests.len())
                .map(|ti| {
                    let mut per_k: [Vec<f64>; 3] = Default::default();
                    for k in 0..3 {
                        per_k[k] = (0..times.len())
                            .map(|si| raw.iter().map(|rep| rep[ti][k][si]).sum::<f64>() / r)
                            .collect();
                    }
                    per_k
                })
                .collect()
        }
        Centering::OracleMean(means) => {
            if n > 8 {
                return Err(FieldsError::CenteringUnavailable(format!(
                    "oracle-mean centering limited to N <= 8, got {n}"
                )));
            }
            if means.times.len() != times.len()
                || means
                    .times
                    .iter()
                    .zip(times)
                    .any(|(a, b)| (a - b).abs() > 1e-12)
            {
                return Err(FieldsError::CenteringUnavailable(
                    "oracle means sampled on a different time grid".into(),
                ));
            }
            (0..tests.len())
                .map(|ti| {
                    let mut per_k: [Vec<f64>; 3] = Default::default();
                    for k in 0..3 {
                        per_k[k] = means
                            .means
                            .iter()
                            .map(|slice| {
                                slice[k]
                                    .iter()
                                    .zip(&tv[ti])
                                    .map(|(m, f)| m * f)
                                    .sum::<f64>()
                            })
                            .collect();
                    }
                    per_k
                })
                .collect()
        }
        Centering::HydrodynamicMean(path) => (0..tests.len())
            .map(|ti| {
                let mut per_k: [Vec<f64>; 3] = Default::default();
                for k in 0..3 {
                    per_k[k] = times
                        .iter()
                        .map(|&t| {
                            let density = path.density_at(t, k);
                            (0..n)
                                .map(|i| density.eval(i as f64 / n as f64) * tv[ti][i])
                                .sum::<f64>()
                        })
                        .collect();
                }
                per_k
            })
            .collect(),
    };

    let mode = match centering {
        Centering::ReplicaMean => CenteringMode::ReplicaMean,
        Centering::OracleMean(_) => CenteringMode::OracleMean,
        Centering::HydrodynamicMean(_) => CenteringMode::HydrodynamicMean,
    };
    Ok(raw
        .into_iter()
        .map(|rep| FluctuationPath {
            times: times.to_vec(),
            values: rep
                .iter()
                .zip(&centers)
                .map(|(per_test, center)| {
                    let mut out: [Vec<f64>; 3] = Default::default();
                    for k in 0..3 {
                        out[k] = per_test[k]
                            .iter()
                            .zip(&center[k])
                            .map(|(raw, c)| (raw - c) / gamma)
                            .collect();
                    }
                    out
                })
                .collect(),
            centering: mode,
            centering_bias_o_inv_gamma: mode == CenteringMode::HydrodynamicMean,
        })
        .collect())
}

/// Dynkin residual
/// `M^N_{f,k}(T) = mu_{T,k}(f) - mu_{0,k}(f) - int_0^T L^N mu_{s,k}(f) ds`,
/// with the integral computed exactly from the piecewise-constant integrand
/// between events.
pub fn dynkin_residual(model: &RateModel, traj: &Trajectory, f: &TorusFunction, k: usize) -> f64 {
    assert!((1..=3).contains(&k), "compartment index must be 1, 2 or 3");
    let n = traj.n();
    let fv: Vec<f64> = (0..n).map(|i| f.eval(i as f64 / n as f64)).collect();
    let psi: Vec<f64> = (0..n).map(|i| model.psi.eval(i as f64 / n as f64)).collect();
    let phi: Vec<f64> = (0..n).map(|i| model.phi.eval(i as f64 / n as f64)).collect();

    let mut states = traj.initial.states.clone();

    // Incrementally maintained pieces of the drift.
    let product = match &model.lambda {
        Kernel::Product { lambda1, lambda2 } => Some((
            (0..n).map(|i| lambda1.eval(i as f64 / n as f64)).collect::<Vec<_>>(),
            (0..n).map(|i| lambda2.eval(i as f64 / n as f64)).collect::<Vec<_>>(),
        )),
        Kernel::Samples { .. } => None,
    };
    let kernel_rows: Option<Vec<Vec<f64>>> = match &model.lambda {
        Kernel::Samples { .. } => Some(
            (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| model.lambda.eval(i as f64 / n as f64, j as f64 / n as f64))
                        .collect()
                })
                .collect(),
        ),
        _ => None,
    };

    // sum over susceptible i, infected j of lambda(u_i, u_j) f(u_i) / N^2
    let infection_pairing = |states: &[State]| -> f64 {
        if let Some((l1, l2)) = &product {
            let s: f64 = (0..n)
                .filter(|&i| states[i] == State::Susceptible)
                .map(|i| l1[i] * fv[i])
                .sum();
            let a: f64 = (0..n)
                .filter(|&j| states[j] == State::Infected)
                .map(|j| l2[j])
                .sum();
            s * a / (n as f64 * n as f64)
        } else {
            let rows = kernel_rows.as_ref().unwrap();
            (0..n)
                .filter(|&i| states[i] == State::Susceptible)
                .map(|i| {
                    fv[i]
                        * (0..n)
                            .filter(|&j| states[j] == State::Infected)
                            .map(|j| rows[i][j])
                            .sum::<f64>()
                })
                .sum::<f64>()
                / (n as f64 * n as f64)
        }
    };
    let psi_pairing = |states: &[State]| -> f64 {
        (0..n)
            .filter(|&i| states[i] == State::Exposed)
            .map(|i| psi[i] * fv[i])
            .sum::<f64>()
            / n as f64
    };
    let phi_pairing = |states: &[State]| -> f64 {
        (0..n)
            .filter(|&i| states[i] == State::Infected)
            .map(|i| phi[i] * fv[i])
            .sum::<f64>()
            / n as f64
    };
    let drift = |states: &[State]| -> f64 {
        match k {
            1 => -infection_pairing(states),
            2 => infection_pairing(states) - psi_pairing(states),
            _ => psi_pairing(states) - phi_pairing(states),
        }
    };
    let mu_k = |states: &[State]| -> f64 {
        (0..n)
            .filter(|&i| states[i] as usize == k - 1)
            .map(|i| fv[i])
            .sum::<f64>()
            / n as f64
    };

    let mu_0 = mu_k(&states);
    let mut integral = 0.0;
    let mut t_prev = 0.0;
    for e in &traj.events {
        integral += drift(&states) * (e.time - t_prev);
        states[e.vertex as usize] = e.transition.target();
        t_prev = e.time;
    }
    integral += drift(&states) * (traj.horizon - t_prev);
    mu_k(&states) - mu_0 - integral
}
