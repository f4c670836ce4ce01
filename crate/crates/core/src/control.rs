//! Admissible control processes on the grid.

use crate::ensemble::PathArray;
use crate::error::{Result, SmpError};
use crate::grid::TimeGrid;

/// A control process with values at every grid node, constrained to the
/// closed convex set `[lower, upper]` (bounds may be infinite).
///
/// Values at node `i` must be built from information available at `t_i`;
/// constructors here only produce deterministic profiles or wrap data the
/// caller built from adapted quantities (e.g. feedback on the current
/// state).
#[derive(Debug, Clone)]
pub struct ControlProcess {
    pub values: PathArray,
    pub lower: f64,
    pub upper: f64,
}

impl ControlProcess {
    pub fn new(values: PathArray, lower: f64, upper: f64) -> Result<Self> {
        if !(lower <= upper) {
            return Err(SmpError::Config(format!(
                "control bounds must satisfy lower <= upper, got [{lower}, {upper}]"
            )));
        }
        Ok(Self {
            values,
            lower,
            upper,
        })
    }

    /// Unbounded admissible set.
    pub fn unbounded(values: PathArray) -> Self {
        Self {
            values,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }

    pub fn constant(grid: &TimeGrid, n_paths: usize, value: f64) -> Self {
        Self::unbounded(PathArray::constant(n_paths, grid.n_nodes(), value))
    }

    /// Deterministic profile `u(t)`, shared by all paths.
    pub fn from_profile<F: Fn(f64) -> f64>(grid: &TimeGrid, n_paths: usize, f: F) -> Self {
        let row: Vec<f64> = grid.nodes().map(f).collect();
        Self::unbounded(PathArray::broadcast_row(n_paths, row))
    }

    #[inline]
    pub fn get(&self, path: usize, node: usize) -> f64 {
        self.values.get(path, node)
    }

    #[inline]
    pub fn n_paths(&self) -> usize {
        self.values.n_paths()
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.values.n_nodes()
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.is_finite() || self.upper.is_finite()
    }

    /// Checks every node against the bounds.
    pub fn validate(&self) -> Result<()> {
        let rows = if self.values.is_broadcast() {
            1
        } else {
            self.n_paths()
        };
        for p in 0..rows {
            for (i, &v) in self.values.row(p).iter().enumerate() {
                if !v.is_finite() || v < self.lower || v > self.upper {
                    return Err(SmpError::Config(format!(
                        "control value {v} at path {p}, node {i} violates bounds [{}, {}]",
                        self.lower, self.upper
                    )));
                }
            }
        }
        Ok(())
    }

    /// `u + scale * v` with the same bounds, without projection.
    pub fn shifted(&self, direction: &ControlProcess, scale: f64) -> Self {
        let n_paths = self.n_paths();
        let n_nodes = self.n_nodes();
        let values = if self.values.is_broadcast() && direction.values.is_broadcast() {
            let row: Vec<f64> = (0..n_nodes)
                .map(|i| self.get(0, i) + scale * direction.get(0, i))
                .collect();
            PathArray::broadcast_row(n_paths, row)
        } else {
            let mut out = PathArray::zeros(n_paths, n_nodes);
            for p in 0..n_paths {
                for i in 0..n_nodes {
                    out.set(p, i, self.get(p, i) + scale * direction.get(p, i));
                }
            }
            out
        };
        Self {
            values,
            lower: self.lower,
            upper: self.upper,
        }
    }

    /// Projects onto the bounds, returning the projected control and the
    /// fraction of nodes the projection actually moved.
    pub fn projected(&self) -> (Self, f64) {
        let rows = if self.values.is_broadcast() {
            1
        } else {
            self.n_paths()
        };
        let n_nodes = self.n_nodes();
        let mut moved = 0usize;
        let mut data: Vec<Vec<f64>> = Vec::with_capacity(rows);
        for p in 0..rows {
            let row: Vec<f64> = self
                .values
                .row(p)
                .iter()
                .map(|&v| {
                    let c = v.clamp(self.lower, self.upper);
                    if c != v {
                        moved += 1;
                    }
                    c
                })
                .collect();
            data.push(row);
        }
        let values = if self.values.is_broadcast() {
            PathArray::broadcast_row(self.n_paths(), data.pop().unwrap())
        } else {
            PathArray::from_rows(data)
        };
        let fraction = moved as f64 / (rows * n_nodes) as f64;
        (
            Self {
                values,
                lower: self.lower,
                upper: self.upper,
            },
            fraction,
        )
    }
}
