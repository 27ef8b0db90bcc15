//! Dense ground truth for small systems: the full `4^N` continuous-time
//! Markov chain, solved transiently by uniformization.
//!
//! States are base-4 packed integers (digit `i` = compartment of vertex `i`);
//! transitions are structural, at most one enabled jump per vertex, so the
//! generator is stored in CSR form with `<= N` off-diagonals per row.

use crate::fields::VertexMeans;
use crate::model::{InitialLaw, Kernel, RateModel};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("state space 4^{0} exceeds the N <= 8 oracle limit")]
    TooLarge(usize),
    #[error("distribution of dimension {got} does not match generator dimension {want}")]
    DimensionMismatch { got: usize, want: usize },
}

/// Poisson tail mass at which the uniformization series is truncated.
const POISSON_TAIL: f64 = 1e-12;

/// Probability vector over the packed state space.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub p: Vec<f64>,
}

impl Distribution {
    /// Point mass on one configuration.
    pub fn delta(dim: usize, state: usize) -> Self {
        let mut p = vec![0.0; dim];
        p[state] = 1.0;
        Self { p }
    }

    /// Product measure of the initial law over `n` vertices.
    pub fn product_initial(law: &InitialLaw, n: usize) -> Self {
        let dim = 1usize << (2 * n);
        let per_vertex: Vec<[f64; 4]> = (0..n)
            .map(|i| law.probabilities(i as f64 / n as f64))
            .collect();
        let mut p = vec![0.0; dim];
        for (x, slot) in p.iter_mut().enumerate() {
            let mut mass = 1.0;
            for (i, probs) in per_vertex.iter().enumerate() {
                mass *= probs[(x >> (2 * i)) & 3];
            }
            *slot = mass;
        }
        Self { p }
    }

    pub fn total_mass(&self) -> f64 {
        self.p.iter().sum()
    }

    /// Total-variation distance to another distribution on the same space.
    pub fn tv_distance(&self, other: &Self) -> f64 {
        0.5 * self
            .p
            .iter()
            .zip(&other.p)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// CSR generator of the `4^N`-state chain. Row sums vanish by construction;
/// the diagonal is stored separately as the negative exit rate.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    pub n: usize,
    dim: usize,
    offsets: Vec<u32>,
    targets: Vec<u32>,
    rates: Vec<f64>,
    exit: Vec<f64>,
}

/// Compartment digit of vertex `i` in packed state `x`.
#[inline]
pub fn digit(x: usize, i: usize) -> usize {
    (x >> (2 * i)) & 3
}

/// Packed state with vertex `i` set to compartment `k`.
#[inline]
pub fn with_digit(x: usize, i: usize, k: usize) -> usize {
    (x & !(3 << (2 * i))) | (k << (2 * i))
}

impl GeneratorMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Uniformization constant `max_x |q(x, x)|`.
    pub fn uniformization_rate(&self) -> f64 {
        self.exit.iter().copied().fold(0.0, f64::max)
    }

    /// Outgoing transitions of one row, `(target, rate)` pairs.
    pub fn row(&self, x: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.offsets[x] as usize;
        let hi = self.offsets[x + 1] as usize;
        self.targets[lo..hi]
            .iter()
            .zip(&self.rates[lo..hi])
            .map(|(t, r)| (*t as usize, *r))
    }

    pub fn exit_rate(&self, x: usize) -> f64 {
        self.exit[x]
    }
}

/// Assembles the generator for `N <= 8` vertices.
pub fn build_generator(model: &RateModel, n: usize) -> Result<GeneratorMatrix, OracleError> {
    if n == 0 || n > 8 {
        return Err(OracleError::TooLarge(n));
    }
    let dim = 1usize << (2 * n);
    let positions: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    let psi: Vec<f64> = positions.iter().map(|&u| model.psi.eval(u)).collect();
    let phi: Vec<f64> = positions.iter().map(|&u| model.phi.eval(u)).collect();
    let (lam1, lam2) = match &model.lambda {
        Kernel::Product { lambda1, lambda2 } => (
            Some(positions.iter().map(|&u| lambda1.eval(u)).collect::<Vec<_>>()),
            Some(positions.iter().map(|&u| lambda2.eval(u)).collect::<Vec<_>>()),
        ),
        Kernel::Samples { .. } => (None, None),
    };
    let kernel_at =
        |i: usize, j: usize| model.lambda.eval(positions[i], positions[j]);

    let mut offsets = Vec::with_capacity(dim + 1);
    let mut targets = Vec::new();
    let mut rates = Vec::new();
    let mut exit = Vec::with_capacity(dim);
    offsets.push(0u32);
    for x in 0..dim {
        let infected: Vec<usize> = (0..n).filter(|&j| digit(x, j) == 2).collect();
        let lam2_sum: f64 = match &lam2 {
            Some(l2) => infected.iter().map(|&j| l2[j]).sum(),
            None => 0.0,
        };
        let mut row_exit = 0.0;
        for i in 0..n {
            let (rate, target_state) = match digit(x, i) {
                0 => {
                    let pressure = if let Some(l1) = &lam1 {
                        l1[i] * lam2_sum / n as f64
                    } else {
                        infected.iter().map(|&j| kernel_at(i, j)).sum::<f64>() / n as f64
                    };
                    (pressure, 1)
                }
                1 => (psi[i], 2),
                2 => (phi[i], 3),
                _ => (0.0, 0),
            };
            if rate > 0.0 {
                targets.push(with_digit(x, i, target_state) as u32);
                rates.push(rate);
                row_exit += rate;
            }
        }
        exit.push(row_exit);
        offsets.push(targets.len() as u32);
    }
    Ok(GeneratorMatrix {
        n,
        dim,
        offsets,
        targets,
        rates,
        exit,
    })
}

/// Transient solve `p_t = p_0 exp(Q t)` by uniformization with the Poisson
/// series truncated once its tail falls below `1e-12`.
pub fn evolve(q: &GeneratorMatrix, p0: &Distribution, t: f64) -> Result<Distribution, OracleError> {
    if p0.p.len() != q.dim {
        return Err(OracleError::DimensionMismatch {
            got: p0.p.len(),
            want: q.dim,
        });
    }
    assert!(t >= 0.0, "uniformization requires t >= 0");
    let lambda = q.uniformization_rate();
    if t == 0.0 || lambda == 0.0 {
        return Ok(p0.clone());
    }
    let a = lambda * t;
    let mut weight = (-a).exp();
    let mut cumulative = weight;
    let mut v = p0.p.clone();
    let mut acc: Vec<f64> = v.iter().map(|x| x * weight).collect();
    let mut scratch = vec![0.0f64; q.dim];
    let mut k = 0usize;
    while cumulative < 1.0 - POISSON_TAIL {
        // v <- v P with P = I + Q / Lambda.
        scratch.iter_mut().for_each(|s| *s = 0.0);
        for x in 0..q.dim {
            let mass = v[x];
            if mass == 0.0 {
                continue;
            }
            scratch[x] += mass * (1.0 - q.exit[x] / lambda);
            let lo = q.offsets[x] as usize;
            let hi = q.offsets[x + 1] as usize;
            for idx in lo..hi {
                scratch[q.targets[idx] as usize] += mass * q.rates[idx] / lambda;
            }
        }
        std::mem::swap(&mut v, &mut scratch);
        k += 1;
        weight *= a / k as f64;
        cumulative += weight;
        for (slot, x) in acc.iter_mut().zip(&v) {
            *slot += weight * x;
        }
    }
    // Renormalize the truncated series; the correction is below the tail bound.
    let mass: f64 = acc.iter().sum();
    acc.iter_mut().for_each(|x| *x /= mass);
    Ok(Distribution { p: acc })
}

/// Per-vertex occupation means and all cross-vertex second moments of a
/// distribution path.
#[derive(Debug, Clone)]
pub struct MomentReport {
    pub n: usize,
    pub times: Vec<f64>,
    /// `means[time][k][i] = E 1{xi(i) = k}` for k = 0..4.
    pub means: Vec<[Vec<f64>; 4]>,
    /// Unordered vertex pairs `(i, j)` with `i < j`, fixed order.
    pub pairs: Vec<(usize, usize)>,
    /// `second[time][pair][k_i][k_j] = E 1{xi(i) = k_i, xi(j) = k_j}`.
    pub second: Vec<Vec<[[f64; 4]; 4]>>,
}

impl MomentReport {
    /// `E 1{xi(i) = ki, xi(j) = kj}` for any ordered `i != j`.
    pub fn pair_moment(&self, time_idx: usize, i: usize, j: usize, ki: usize, kj: usize) -> f64 {
        assert_ne!(i, j);
        let (a, b, ka, kb) = if i < j { (i, j, ki, kj) } else { (j, i, kj, ki) };
        let pair_idx = self
            .pairs
            .iter()
            .position(|&(x, y)| (x, y) == (a, b))
            .expect("pair indexed");
        self.second[time_idx][pair_idx][ka][kb]
    }

    pub fn covariance(&self, time_idx: usize, i: usize, j: usize, ki: usize, kj: usize) -> f64 {
        self.pair_moment(time_idx, i, j, ki, kj)
            - self.means[time_idx][ki][i] * self.means[time_idx][kj][j]
    }

    /// Largest cross-vertex covariance magnitude at one sample time.
    pub fn max_abs_covariance(&self, time_idx: usize) -> f64 {
        let mut worst = 0.0f64;
        for &(i, j) in &self.pairs {
            for ki in 0..4 {
                for kj in 0..4 {
                    worst = worst.max(self.covariance(time_idx, i, j, ki, kj).abs());
                }
            }
        }
        worst
    }

    /// Means in the layout expected by oracle-mean fluctuation centering.
    pub fn vertex_means(&self) -> VertexMeans {
        VertexMeans {
            times: self.times.clone(),
            means: self
                .means
                .iter()
                .map(|per_k| [per_k[0].clone(), per_k[1].clone(), per_k[2].clone()])
                .collect(),
        }
    }
}

/// Extracts means and pairwise second moments from a distribution path.
pub fn exact_moments(n: usize, path: &[Distribution], times: &[f64]) -> MomentReport {
    assert_eq!(path.len(), times.len());
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    let mut means = Vec::with_capacity(times.len());
    let mut second = Vec::with_capacity(times.len());
    for dist in path {
        let mut mean: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);
        let mut pair_mom = vec![[[0.0f64; 4]; 4]; pairs.len()];
        let mut digits = vec![0usize; n];
        for (x, &mass) in dist.p.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (i, d) in digits.iter_mut().enumerate() {
                *d = digit(x, i);
            }
            for i in 0..n {
                mean[digits[i]][i] += mass;
            }
            for (pair_idx, &(i, j)) in pairs.iter().enumerate() {
                pair_mom[pair_idx][digits[i]][digits[j]] += mass;
            }
        }
        means.push(mean);
        second.push(pair_mom);
    }
    MomentReport {
        n,
        times: times.to_vec(),
        means,
        pairs,
        second,
    }
}

/// Right-hand side of the first-moment evolution at one time slice:
/// `d/dt E S(i) = -(1/N) sum_j lambda(u_i, u_j) E(S(i) I(j))` and the
/// matching expressions for E and I.
pub fn moment_ode_rhs(model: &RateModel, report: &MomentReport, time_idx: usize) -> Vec<[f64; 3]> {
    let n = report.n;
    let positions: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    (0..n)
        .map(|i| {
            let mut infection = 0.0;
            for j in 0..n {
                if j != i {
                    infection += model.lambda.eval(positions[i], positions[j])
                        * report.pair_moment(time_idx, i, j, 0, 2);
                }
            }
            infection /= n as f64;
            let e_mean = report.means[time_idx][1][i];
            let i_mean = report.means[time_idx][2][i];
            let psi = model.psi.eval(positions[i]);
            let phi = model.phi.eval(positions[i]);
            [-infection, infection - psi * e_mean, psi * e_mean - phi * i_mean]
        })
        .collect()
}
