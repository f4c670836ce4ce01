//! Forward simulation of the controlled SDE with time-varying delay
//!
//!   dX_t = b(t, X_t, X_tau, u_t, u_tau) dt + sigma(t, X_t, X_tau, u_t, u_tau) dW_t
//!
//! by Euler-Maruyama, plus the Picard construction that builds the same
//! discrete fixed point by iterating the integral map from a constant
//! initial guess.

use crate::brownian::BrownianBundle;
use crate::coeffs::CoefficientSet;
use crate::control::ControlProcess;
use crate::delay::DelayMap;
use crate::ensemble::PathArray;
use crate::error::{Result, SmpError};
use crate::grid::TimeGrid;
use std::sync::Arc;

/// Simulated state paths, together with the inputs they were produced from.
#[derive(Debug, Clone)]
pub struct StateEnsemble {
    pub values: Arc<PathArray>,
    pub grid: TimeGrid,
    pub delay: Arc<DelayMap>,
    pub control: Arc<ControlProcess>,
    pub initial_state: f64,
}

impl StateEnsemble {
    #[inline]
    pub fn n_paths(&self) -> usize {
        self.values.n_paths()
    }

    #[inline]
    pub fn get(&self, path: usize, node: usize) -> f64 {
        self.values.get(path, node)
    }
}

/// Convergence record of a Picard run. `gaps[k]` is the sup over grid nodes
/// of the sample mean-square difference between iterates `k+1` and `k`.
#[derive(Debug, Clone)]
pub struct PicardDiagnostics {
    pub gaps: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn check_consistent(
    control: &ControlProcess,
    delay: &DelayMap,
    bundle: &BrownianBundle,
) -> Result<()> {
    let n_paths = bundle.n_paths();
    let n_nodes = bundle.grid().n_nodes();
    if control.n_paths() != n_paths || delay.n_paths() != n_paths {
        return Err(SmpError::Config(format!(
            "path count mismatch: bundle {}, control {}, delay {}",
            n_paths,
            control.n_paths(),
            delay.n_paths()
        )));
    }
    if control.n_nodes() != n_nodes || delay.n_nodes() != n_nodes {
        return Err(SmpError::Config(format!(
            "node count mismatch: grid {}, control {}, delay {}",
            n_nodes,
            control.n_nodes(),
            delay.n_nodes()
        )));
    }
    Ok(())
}

/// Euler-Maruyama scheme for the delayed SDE. Delayed state and control
/// reads use the floor-projected delay map, so they never look forward.
///
/// Fails fast with the first `(path, step)` where a non-finite value
/// appears; values are never clipped.
pub fn euler_maruyama(
    coeffs: &CoefficientSet,
    control: Arc<ControlProcess>,
    delay: Arc<DelayMap>,
    bundle: &BrownianBundle,
    initial_state: f64,
) -> Result<StateEnsemble> {
    check_consistent(&control, &delay, bundle)?;
    let grid = *bundle.grid();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let n_paths = bundle.n_paths();

    let mut values = PathArray::zeros(n_paths, n_steps + 1);
    let fails: Vec<Option<(usize, usize)>> = {
        use rayon::prelude::*;
        let control = &control;
        let delay = &delay;
        values
            .rows_mut()
            .enumerate()
            .map(|(p, row)| {
                row[0] = initial_state;
                for i in 0..n_steps {
                    let t = grid.node(i);
                    let j = delay.idx(p, i);
                    let x = row[i];
                    let xd = row[j];
                    let u = control.get(p, i);
                    let ud = control.get(p, j);
                    let drift = (coeffs.drift)(t, x, xd, u, ud);
                    let diffusion = (coeffs.diffusion)(t, x, xd, u, ud);
                    let next = x + drift * dt + diffusion * bundle.increment(p, i);
                    if !next.is_finite() {
                        return Some((p, i));
                    }
                    row[i + 1] = next;
                }
                None
            })
            .collect()
    };
    if let Some((path, step)) = fails.into_iter().flatten().next() {
        return Err(SmpError::BlowUp { path, step });
    }
    Ok(StateEnsemble {
        values: Arc::new(values),
        grid,
        delay,
        control,
        initial_state,
    })
}

/// Picard iteration of the integral mapping: each sweep builds
/// the Euler discretization of the integral equation with the coefficients
/// evaluated along the PREVIOUS iterate. Converged iterates satisfy the
/// same discrete recursion as [`euler_maruyama`].
pub fn picard_solve(
    coeffs: &CoefficientSet,
    control: Arc<ControlProcess>,
    delay: Arc<DelayMap>,
    bundle: &BrownianBundle,
    initial_state: f64,
    max_sweeps: usize,
    tol: f64,
) -> Result<(StateEnsemble, PicardDiagnostics)> {
    check_consistent(&control, &delay, bundle)?;
    if max_sweeps == 0 {
        return Err(SmpError::Config("max_sweeps must be at least 1".into()));
    }
    if !(tol > 0.0) {
        return Err(SmpError::Config(format!("tol must be positive, got {tol}")));
    }
    let grid = *bundle.grid();
    let result = picard_iterate(
        coeffs,
        &control,
        &delay,
        bundle,
        PathArray::constant(bundle.n_paths(), grid.n_nodes(), initial_state),
        max_sweeps,
        tol,
    )?;
    let (values, diagnostics) = result;
    if !diagnostics.converged {
        return Err(SmpError::NoConvergence {
            iterations: diagnostics.iterations,
            gaps: diagnostics.gaps,
        });
    }
    Ok((
        StateEnsemble {
            values: Arc::new(values),
            grid,
            delay,
            control,
            initial_state,
        },
        diagnostics,
    ))
}

/// One full Picard run from an arbitrary initial guess; used by the
/// uniqueness checks. Returns the final iterate even when not converged.
pub fn picard_iterate(
    coeffs: &CoefficientSet,
    control: &ControlProcess,
    delay: &DelayMap,
    bundle: &BrownianBundle,
    initial_guess: PathArray,
    max_sweeps: usize,
    tol: f64,
) -> Result<(PathArray, PicardDiagnostics)> {
    use rayon::prelude::*;
    let grid = *bundle.grid();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let n_paths = bundle.n_paths();
    let initial_state = initial_guess.get(0, 0);

    let mut prev = initial_guess.densified();
    let mut gaps = Vec::new();
    let mut converged = false;
    let mut sweeps = 0usize;

    for _ in 0..max_sweeps {
        sweeps += 1;
        let mut next = PathArray::zeros(n_paths, n_steps + 1);
        let prev_ref = &prev;
        let fails: Vec<Option<(usize, usize)>> = next
            .rows_mut()
            .enumerate()
            .map(|(p, row)| {
                row[0] = initial_state;
                for i in 0..n_steps {
                    let t = grid.node(i);
                    let j = delay.idx(p, i);
                    // coefficients along the previous iterate
                    let x = prev_ref.get(p, i);
                    let xd = prev_ref.get(p, j);
                    let u = control.get(p, i);
                    let ud = control.get(p, j);
                    let drift = (coeffs.drift)(t, x, xd, u, ud);
                    let diffusion = (coeffs.diffusion)(t, x, xd, u, ud);
                    let next_v = row[i] + drift * dt + diffusion * bundle.increment(p, i);
                    if !next_v.is_finite() {
                        return Some((p, i));
                    }
                    row[i + 1] = next_v;
                }
                None
            })
            .collect();
        if let Some((path, step)) = fails.into_iter().flatten().next() {
            return Err(SmpError::BlowUp { path, step });
        }
        let gap = mean_square_gap(&next, &prev);
        gaps.push(gap);
        prev = next;
        if gap <= tol {
            converged = true;
            break;
        }
    }
    Ok((
        prev,
        PicardDiagnostics {
            gaps,
            iterations: sweeps,
            converged,
        },
    ))
}

/// Sup over grid nodes of the sample mean-square difference between two
/// path arrays (the discrete Picard gap metric).
pub fn mean_square_gap(a: &PathArray, b: &PathArray) -> f64 {
    let n_nodes = a.n_nodes();
    let n_paths = a.n_paths();
    let mut sup = 0.0f64;
    for i in 0..n_nodes {
        let mean_sq = crate::ensemble::block_sum(n_paths, &|p| {
            let d = a.get(p, i) - b.get(p, i);
            d * d
        }) / n_paths as f64;
        sup = sup.max(mean_sq);
    }
    sup
}
