use crate::error::{Result, SmpError};

/// Uniform partition of `[0, T]` on which every process in the library lives.
///
/// Node `i` sits at `i * dt` with `dt = T / n_steps`; the final node is pinned
/// to `T` exactly so that terminal conditions are bit-exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(SmpError::Config(format!(
                "time horizon must be finite and positive, got {horizon}"
            )));
        }
        if n_steps < 2 {
            return Err(SmpError::Config(format!(
                "grid needs at least 2 steps, got {n_steps}"
            )));
        }
        Ok(Self {
            horizon,
            n_steps,
            dt: horizon / n_steps as f64,
        })
    }

    #[inline]
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    #[inline]
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of grid nodes, `n_steps + 1`.
    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Time of node `i`; the last node returns the horizon exactly.
    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i <= self.n_steps);
        if i == self.n_steps {
            self.horizon
        } else {
            i as f64 * self.dt
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |i| self.node(i))
    }

    /// Largest node index `j` with `node(j) <= t`, clamped to the grid.
    ///
    /// A small absolute guard (in grid units) snaps values that are an
    /// integer number of steps up to round-off, so that e.g. `0.5 * t_2`
    /// on a `dt = 0.25` grid projects to node 1 and not node 0.
    #[inline]
    pub fn floor_index(&self, t: f64) -> usize {
        if t <= 0.0 {
            return 0;
        }
        let units = t / self.dt + 1e-9;
        let j = units.floor() as usize;
        j.min(self.n_steps)
    }
}
