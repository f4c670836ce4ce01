//! Reproducible Brownian increment ensembles.

use crate::ensemble::PathArray;
use crate::error::{Result, SmpError};
use crate::grid::TimeGrid;
use crate::rng::{CounterRng, STREAM_BROWNIAN};
use rayon::prelude::*;

/// Ensemble of Brownian increments, one substream per path.
///
/// Path `p` consumes only the `(master_seed, STREAM_BROWNIAN, p)` stream,
/// so regeneration is bit-identical for any worker count or generation
/// order.
#[derive(Debug, Clone)]
pub struct BrownianBundle {
    grid: TimeGrid,
    n_paths: usize,
    master_seed: u64,
    increments: Vec<f64>,
}

impl BrownianBundle {
    #[inline]
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    #[inline]
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    #[inline]
    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Increment over `[t_i, t_{i+1})` for a path.
    #[inline]
    pub fn increment(&self, path: usize, step: usize) -> f64 {
        debug_assert!(path < self.n_paths && step < self.grid.n_steps());
        self.increments[path * self.grid.n_steps() + step]
    }

    pub fn increments_row(&self, path: usize) -> &[f64] {
        let n = self.grid.n_steps();
        &self.increments[path * n..(path + 1) * n]
    }

    /// Cumulative Brownian values `W` on the nodes (`W_0 = 0`).
    pub fn cumulative(&self) -> PathArray {
        let n_steps = self.grid.n_steps();
        let mut w = PathArray::zeros(self.n_paths, n_steps + 1);
        let inc = &self.increments;
        w.rows_mut().enumerate().for_each(|(p, row)| {
            let mut acc = 0.0;
            row[0] = 0.0;
            for i in 0..n_steps {
                acc += inc[p * n_steps + i];
                row[i + 1] = acc;
            }
        });
        w
    }
}

/// Samples Brownian increments with variance `dt` per step.
pub fn sample_brownian(grid: &TimeGrid, n_paths: usize, master_seed: u64) -> Result<BrownianBundle> {
    if n_paths == 0 {
        return Err(SmpError::Config("n_paths must be at least 1".into()));
    }
    let n_steps = grid.n_steps();
    let sqrt_dt = grid.dt().sqrt();
    let mut increments = vec![0.0f64; n_paths * n_steps];
    increments
        .par_chunks_mut(n_steps)
        .enumerate()
        .for_each(|(p, row)| {
            let mut rng = CounterRng::from_stream(master_seed, STREAM_BROWNIAN, p as u64);
            for slot in row.iter_mut() {
                *slot = sqrt_dt * rng.normal();
            }
        });
    Ok(BrownianBundle {
        grid: *grid,
        n_paths,
        master_seed,
        increments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_bit_identical() {
        let g = TimeGrid::new(1.0, 16).unwrap();
        let a = sample_brownian(&g, 32, 77).unwrap();
        let b = sample_brownian(&g, 32, 77).unwrap();
        assert_eq!(a.increments, b.increments);
    }

    #[test]
    fn single_path_works() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let b = sample_brownian(&g, 1, 5).unwrap();
        assert_eq!(b.increments_row(0).len(), 8);
        assert!(b.increments_row(0).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_paths_is_config_error() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        assert!(sample_brownian(&g, 0, 5).is_err());
    }

    #[test]
    fn step_moments_within_five_sigma() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let n_paths = 100_000;
        let b = sample_brownian(&g, n_paths, 2024).unwrap();
        let dt = g.dt();
        let n = n_paths as f64;
        for step in [0usize, 37, 99] {
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            for p in 0..n_paths {
                let x = b.increment(p, step);
                sum += x;
                sum2 += x * x;
            }
            let mean = sum / n;
            let var = sum2 / n - mean * mean;
            // mean ~ N(0, dt/n); var estimate has sd ~ sqrt(2/n) * dt
            assert!(mean.abs() < 5.0 * (dt / n).sqrt(), "mean {mean} at {step}");
            assert!(
                (var - dt).abs() < 5.0 * dt * (2.0 / n).sqrt(),
                "var {var} at {step}"
            );
        }
    }

    #[test]
    fn cumulative_starts_at_zero_and_sums() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let b = sample_brownian(&g, 3, 9).unwrap();
        let w = b.cumulative();
        for p in 0..3 {
            assert_eq!(w.get(p, 0), 0.0);
            let mut acc = 0.0;
            for i in 0..4 {
                acc += b.increment(p, i);
                assert!((w.get(p, i + 1) - acc).abs() < 1e-15);
            }
        }
    }
}
