//! Delay maps `tau(t) <= t` on the grid and their pseudo-inverses
//! `theta(t) = inf{s : tau(s) >= t}`.
//!
//! Delayed reads are projected to the largest grid node below `tau(t_i)`
//! (never forward in time, so the scheme stays adapted). The pseudo-inverse
//! projects upward, which makes the Galois property
//! `tau_idx[j] >= i  <=>  j >= theta_idx[i]` exact on the grid.

use crate::error::{Result, SmpError};
use crate::grid::TimeGrid;
use crate::rng::{CounterRng, STREAM_DELAY};
use rayon::prelude::*;

/// Sentinel index meaning "the pseudo-inverse leaves the horizon".
pub const BEYOND: u32 = u32::MAX;

/// Specification of the delay map `tau`.
///
/// Every realization is nondecreasing with `tau(t) <= t`, and random kinds
/// are drawn from a stream independent of the Brownian noise.
#[derive(Debug, Clone, PartialEq)]
pub enum DelaySpec {
    /// `tau(t) = a * t` with `0 < a <= 1` (the moving-average delay).
    Proportional { a: f64 },
    /// `tau(t) = max(t - lag, 0)` with `0 <= lag <= T`.
    FixedLag { lag: f64 },
    /// `tau(t) = theta * t` with a slope drawn once per path,
    /// uniform in `[a_min, a_max]`, `0 < a_min <= a_max <= 1`.
    RandomSlope { a_min: f64, a_max: f64 },
    /// Compound-Poisson staircase: `tau` jumps by `step` at Poisson(rate)
    /// event times, clipped to stay below `t`.
    PiecewiseJump { rate: f64, step: f64 },
}

impl DelaySpec {
    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        match *self {
            DelaySpec::Proportional { a } => {
                if !(a > 0.0 && a <= 1.0) {
                    return Err(SmpError::Config(format!(
                        "a must lie in (0,1], got {a}"
                    )));
                }
            }
            DelaySpec::FixedLag { lag } => {
                if !(0.0..=grid.horizon()).contains(&lag) {
                    return Err(SmpError::Config(format!(
                        "lag must lie in [0, {}], got {lag}",
                        grid.horizon()
                    )));
                }
            }
            DelaySpec::RandomSlope { a_min, a_max } => {
                if !(a_min > 0.0 && a_min <= a_max && a_max <= 1.0) {
                    return Err(SmpError::Config(format!(
                        "slope range must satisfy 0 < a_min <= a_max <= 1, got [{a_min}, {a_max}]"
                    )));
                }
            }
            DelaySpec::PiecewiseJump { rate, step } => {
                if !(rate > 0.0 && rate.is_finite()) {
                    return Err(SmpError::Config(format!(
                        "jump rate must be positive, got {rate}"
                    )));
                }
                if !(step > 0.0 && step.is_finite()) {
                    return Err(SmpError::Config(format!(
                        "jump step must be positive, got {step}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Deterministic kinds produce one shared map for all paths.
    pub fn is_deterministic(&self) -> bool {
        matches!(
            self,
            DelaySpec::Proportional { .. } | DelaySpec::FixedLag { .. }
        )
    }
}

/// Grid projection of a realized delay: `idx(p, i)` is the node index `j`
/// such that the delayed read at node `t_i` is taken at `t_j`, with
/// `j <= i` and `j` nondecreasing in `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayMap {
    n_paths: usize,
    n_nodes: usize,
    shared: bool,
    idx: Vec<u32>,
    grid: TimeGrid,
}

impl DelayMap {
    /// Identity map `tau(t) = t` (no delay).
    pub fn identity(grid: &TimeGrid, n_paths: usize) -> Self {
        Self {
            n_paths,
            n_nodes: grid.n_nodes(),
            shared: true,
            idx: (0..grid.n_nodes() as u32).collect(),
            grid: *grid,
        }
    }

    fn from_shared_row(grid: &TimeGrid, n_paths: usize, row: Vec<u32>) -> Self {
        Self {
            n_paths,
            n_nodes: grid.n_nodes(),
            shared: true,
            idx: row,
            grid: *grid,
        }
    }

    #[inline]
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    #[inline]
    pub fn is_shared(&self) -> bool {
        self.shared
    }

    #[inline]
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Delayed node index for `(path, node)`.
    #[inline]
    pub fn idx(&self, path: usize, node: usize) -> usize {
        debug_assert!(path < self.n_paths && node < self.n_nodes);
        let v = if self.shared {
            self.idx[node]
        } else {
            self.idx[path * self.n_nodes + node]
        };
        v as usize
    }

    /// Time of the delayed read, `t_{idx(p, i)}`.
    #[inline]
    pub fn delayed_time(&self, path: usize, node: usize) -> f64 {
        self.grid.node(self.idx(path, node))
    }

    fn row(&self, path: usize) -> &[u32] {
        if self.shared {
            &self.idx
        } else {
            &self.idx[path * self.n_nodes..(path + 1) * self.n_nodes]
        }
    }

    fn check_row(row: &[u32]) {
        for (i, &v) in row.iter().enumerate() {
            debug_assert!(v as usize <= i, "delay looks forward at node {i}");
        }
        debug_assert!(row.windows(2).all(|w| w[0] <= w[1]), "delay map not monotone");
    }
}

/// Realizes the delay specification on the grid.
///
/// The delayed time `tau(t_i)` is floor-projected to the largest node below
/// it; random kinds consume the delay stream derived from `seed`, which is
/// disjoint from the Brownian stream of the same master seed.
pub fn realize_delay(
    spec: &DelaySpec,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<DelayMap> {
    spec.validate(grid)?;
    if n_paths == 0 {
        return Err(SmpError::Config("n_paths must be at least 1".into()));
    }
    let n_nodes = grid.n_nodes();
    match *spec {
        DelaySpec::Proportional { a } => {
            let row: Vec<u32> = (0..n_nodes)
                .map(|i| grid.floor_index(a * grid.node(i)).min(i) as u32)
                .collect();
            DelayMap::check_row(&row);
            Ok(DelayMap::from_shared_row(grid, n_paths, row))
        }
        DelaySpec::FixedLag { lag } => {
            let row: Vec<u32> = (0..n_nodes)
                .map(|i| grid.floor_index(grid.node(i) - lag).min(i) as u32)
                .collect();
            DelayMap::check_row(&row);
            Ok(DelayMap::from_shared_row(grid, n_paths, row))
        }
        DelaySpec::RandomSlope { a_min, a_max } => {
            let mut idx = vec![0u32; n_paths * n_nodes];
            idx.par_chunks_mut(n_nodes).enumerate().for_each(|(p, row)| {
                let mut rng = CounterRng::from_stream(seed, STREAM_DELAY, p as u64);
                let slope = if a_min == a_max {
                    a_min
                } else {
                    rng.uniform_in(a_min, a_max)
                };
                for (i, slot) in row.iter_mut().enumerate() {
                    *slot = grid.floor_index(slope * grid.node(i)).min(i) as u32;
                }
                DelayMap::check_row(row);
            });
            Ok(DelayMap {
                n_paths,
                n_nodes,
                shared: false,
                idx,
                grid: *grid,
            })
        }
        DelaySpec::PiecewiseJump { rate, step } => {
            let mut idx = vec![0u32; n_paths * n_nodes];
            idx.par_chunks_mut(n_nodes).enumerate().for_each(|(p, row)| {
                let mut rng = CounterRng::from_stream(seed, STREAM_DELAY, p as u64);
                // Poisson event times; the staircase level rises by `step`
                // at each event and is clipped to stay at or below t.
                let mut event_time = rng.exponential(rate);
                let mut level = 0.0f64;
                for (i, slot) in row.iter_mut().enumerate() {
                    let t = grid.node(i);
                    while event_time <= t {
                        level += step;
                        event_time += rng.exponential(rate);
                    }
                    let tau = level.min(t);
                    *slot = grid.floor_index(tau).min(i) as u32;
                }
                DelayMap::check_row(row);
            });
            Ok(DelayMap {
                n_paths,
                n_nodes,
                shared: false,
                idx,
                grid: *grid,
            })
        }
    }
}

/// Pseudo-inverse of a delay map: `theta_idx[i]` is the smallest node `j`
/// with `tau_idx[j] >= i`, or [`BEYOND`] when the delay never catches up
/// within the horizon. `weight(p, i)` carries the discrete `d theta`
/// measure of `[t_i, t_{i+1})`, capped at the horizon so contributions past
/// `T` are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseDelayMap {
    n_paths: usize,
    n_nodes: usize,
    shared: bool,
    theta: Vec<u32>,
    dtheta: Vec<f64>,
    grid: TimeGrid,
}

impl InverseDelayMap {
    #[inline]
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    #[inline]
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    #[inline]
    pub fn is_shared(&self) -> bool {
        self.shared
    }

    /// Anticipated node index, `None` when beyond the horizon.
    #[inline]
    pub fn idx(&self, path: usize, node: usize) -> Option<usize> {
        let v = if self.shared {
            self.theta[node]
        } else {
            self.theta[path * self.n_nodes + node]
        };
        (v != BEYOND).then_some(v as usize)
    }

    /// Raw index row value (BEYOND sentinel preserved), for tests.
    #[inline]
    pub fn raw_idx(&self, path: usize, node: usize) -> u32 {
        if self.shared {
            self.theta[node]
        } else {
            self.theta[path * self.n_nodes + node]
        }
    }

    /// Discrete `d theta` weight of `[t_i, t_{i+1})`; zero at BEYOND nodes.
    #[inline]
    pub fn weight(&self, path: usize, node: usize) -> f64 {
        debug_assert!(node + 1 < self.n_nodes);
        if self.shared {
            self.dtheta[node]
        } else {
            self.dtheta[path * (self.n_nodes - 1) + node]
        }
    }
}

/// Builds the pseudo-inverse of a realized delay map.
pub fn pseudo_inverse(delay: &DelayMap, grid: &TimeGrid) -> InverseDelayMap {
    let n_nodes = grid.n_nodes();
    let rows = if delay.is_shared() { 1 } else { delay.n_paths() };
    let mut theta = vec![0u32; rows * n_nodes];
    let mut dtheta = vec![0.0f64; rows * (n_nodes - 1)];
    theta
        .par_chunks_mut(n_nodes)
        .zip(dtheta.par_chunks_mut(n_nodes - 1))
        .enumerate()
        .for_each(|(p, (theta_row, dtheta_row))| {
            let tau = delay.row(p);
            // two-pointer sweep: tau is nondecreasing
            let mut j = 0usize;
            for (i, slot) in theta_row.iter_mut().enumerate() {
                while j < n_nodes && (tau[j] as usize) < i {
                    j += 1;
                }
                *slot = if j < n_nodes { j as u32 } else { BEYOND };
            }
            // d theta over [t_i, t_{i+1}): theta capped at the horizon, so
            // BEYOND entries act like theta = T when the left end is still
            // inside and contribute zero once both ends have left.
            for i in 0..n_nodes - 1 {
                let lo = theta_row[i];
                if lo == BEYOND {
                    dtheta_row[i] = 0.0;
                    continue;
                }
                let hi = theta_row[i + 1];
                let t_lo = grid.node(lo as usize);
                let t_hi = if hi == BEYOND {
                    grid.horizon()
                } else {
                    grid.node(hi as usize)
                };
                dtheta_row[i] = t_hi - t_lo;
            }
        });
    InverseDelayMap {
        n_paths: delay.n_paths(),
        n_nodes,
        shared: delay.is_shared(),
        theta,
        dtheta,
        grid: *grid,
    }
}
