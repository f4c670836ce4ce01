//! Backward solver for generalized anticipated BSDEs
//!
//!   -dy_t = h(t, y_t, z_t) dt + E[ l(t, theta(t), y_theta, z_theta) d theta(t) | F_t ]
//!           - z_t dW_t,
//!    y_T  = xi,    y_t = z_t = 0 for t > T,
//!
//! where `theta(t) >= t` is the (possibly random) pseudo-inverse of the
//! delay. Conditional expectations are estimated by least-squares
//! regression on the conditioning variables; anticipated reads index
//! already-computed future rows of the backward sweep, and reads beyond
//! the horizon contribute exactly zero.

use crate::brownian::BrownianBundle;
use crate::coeffs::{CoefKind, CoefficientSet, Slot};
use crate::control::ControlProcess;
use crate::delay::InverseDelayMap;
use crate::ensemble::{block_sum, PathArray};
use crate::error::{Result, SmpError};
use crate::forward::StateEnsemble;
use crate::grid::TimeGrid;
use crate::regression::{ConditioningSet, RegressionBasis, StepRegressor};
use std::sync::Arc;

/// Driver callback `(path, step, y, z) -> h`.
pub type DriverFn = Arc<dyn Fn(usize, usize, f64, f64) -> f64 + Send + Sync>;
/// Anticipation callback `(path, step, theta_step, y_theta, z_theta) -> l`.
pub type AnticipationFn = Arc<dyn Fn(usize, usize, usize, f64, f64) -> f64 + Send + Sync>;

/// A generalized anticipated BSDE on the grid.
pub struct AbsdeProblem {
    pub driver: DriverFn,
    pub anticipation: AnticipationFn,
    pub theta: Arc<InverseDelayMap>,
    /// Terminal values per path.
    pub terminal: Vec<f64>,
}

impl AbsdeProblem {
    /// A problem with no anticipation term (a classical BSDE); the solver
    /// arithmetic is identical with the anticipation contribution pinned
    /// to zero.
    pub fn classical(driver: DriverFn, theta: Arc<InverseDelayMap>, terminal: Vec<f64>) -> Self {
        Self {
            driver,
            anticipation: Arc::new(|_, _, _, _, _| 0.0),
            theta,
            terminal,
        }
    }
}

/// Solution pair of a backward solve on the grid. `z` carries a trailing
/// zero row at the horizon (the past-horizon extension).
#[derive(Debug, Clone)]
pub struct AdjointEnsemble {
    pub y: PathArray,
    pub z: PathArray,
    pub grid: TimeGrid,
}

impl AdjointEnsemble {
    pub fn zeros(grid: TimeGrid, n_paths: usize) -> Self {
        Self {
            y: PathArray::zeros(n_paths, grid.n_nodes()),
            z: PathArray::zeros(n_paths, grid.n_nodes()),
            grid,
        }
    }

    #[inline]
    pub fn n_paths(&self) -> usize {
        self.y.n_paths()
    }
}

/// Weighted norm `sup_i E e^{beta t_i} y_i^2 + sum_i E e^{beta t_i} z_i^2 dt`
/// (sup over all nodes, left Riemann sum for the integral term).
pub fn beta_norm(pair: &AdjointEnsemble, beta: f64) -> f64 {
    let grid = &pair.grid;
    let n_paths = pair.n_paths() as f64;
    let mut sup = 0.0f64;
    for i in 0..grid.n_nodes() {
        let w = (beta * grid.node(i)).exp();
        let mean_sq = block_sum(pair.n_paths(), &|p| {
            let v = pair.y.get(p, i);
            v * v
        }) / n_paths;
        sup = sup.max(w * mean_sq);
    }
    let mut integral = 0.0f64;
    for i in 0..grid.n_steps() {
        let w = (beta * grid.node(i)).exp();
        let mean_sq = block_sum(pair.n_paths(), &|p| {
            let v = pair.z.get(p, i);
            v * v
        }) / n_paths;
        integral += w * mean_sq * grid.dt();
    }
    sup + integral
}

fn beta_norm_diff(a: &AdjointEnsemble, b: &AdjointEnsemble, beta: f64) -> f64 {
    let grid = &a.grid;
    let n_paths = a.n_paths() as f64;
    let mut sup = 0.0f64;
    for i in 0..grid.n_nodes() {
        let w = (beta * grid.node(i)).exp();
        let mean_sq = block_sum(a.n_paths(), &|p| {
            let d = a.y.get(p, i) - b.y.get(p, i);
            d * d
        }) / n_paths;
        sup = sup.max(w * mean_sq);
    }
    let mut integral = 0.0f64;
    for i in 0..grid.n_steps() {
        let w = (beta * grid.node(i)).exp();
        let mean_sq = block_sum(a.n_paths(), &|p| {
            let d = a.z.get(p, i) - b.z.get(p, i);
            d * d
        }) / n_paths;
        integral += w * mean_sq * grid.dt();
    }
    sup + integral
}

fn check_problem(problem: &AbsdeProblem, bundle: &BrownianBundle) -> Result<()> {
    let n_paths = bundle.n_paths();
    if problem.terminal.len() != n_paths {
        return Err(SmpError::Config(format!(
            "terminal vector has {} entries for {} paths",
            problem.terminal.len(),
            n_paths
        )));
    }
    if problem.theta.n_paths() != n_paths {
        return Err(SmpError::Config(format!(
            "theta map has {} paths, bundle has {}",
            problem.theta.n_paths(),
            n_paths
        )));
    }
    Ok(())
}

/// Reads of the previous iterate used by the fixed-point sweeps. Both
/// sources use the explicit-step convention `(y_{i+1}, z_i)` for the
/// driver, so the contraction mapping and the direct recursion share the
/// same discrete fixed point.
enum FeedbackSource<'a> {
    /// Direct recursion: driver and anticipation on the rows of the
    /// current sweep.
    Own,
    /// Contraction mapping: driver and anticipation on a frozen pair.
    Frozen(&'a AdjointEnsemble),
}

fn backward_sweep(
    problem: &AbsdeProblem,
    bundle: &BrownianBundle,
    cond: &ConditioningSet<'_>,
    basis: &RegressionBasis,
    source: FeedbackSource<'_>,
) -> Result<AdjointEnsemble> {
    check_problem(problem, bundle)?;
    let grid = *bundle.grid();
    let n_steps = grid.n_steps();
    let n_paths = bundle.n_paths();
    let dt = grid.dt();
    let n_vars = cond.n_vars();
    if n_vars == 0 {
        return Err(SmpError::Config(
            "conditioning set must expose at least one variable".into(),
        ));
    }

    let mut out = AdjointEnsemble::zeros(grid, n_paths);
    out.y.fill_node(n_steps, |p| problem.terminal[p]);

    let mut reg = StepRegressor::new(*basis);
    let mut raw: Vec<f64> = Vec::new();
    let mut target: Vec<f64> = Vec::with_capacity(n_paths);

    for i in (0..n_steps).rev() {
        cond.raw_at_node(i, n_paths, &mut raw);
        reg.prepare(&raw, n_paths, n_vars)?;

        // continuation value c_i = E[ y_{i+1} | F_i ]
        target.clear();
        target.extend((0..n_paths).map(|p| out.y.get(p, i + 1)));
        let continuation = reg.fitted(&target)?;

        // z_i = E[ (y_{i+1} - c_i) dW_i / dt | F_i ]; centering by the
        // F_i-measurable continuation leaves the expectation unchanged
        // and removes the dominant variance of the raw product
        target.clear();
        target.extend(
            (0..n_paths)
                .map(|p| (out.y.get(p, i + 1) - continuation[p]) * bundle.increment(p, i) / dt),
        );
        let z_fit = reg.fitted(&target)?;
        out.z.fill_node(i, |p| z_fit[p]);

        // anticipation contribution over [t_i, t_{i+1})
        target.clear();
        for p in 0..n_paths {
            let w = problem.theta.weight(p, i);
            let contrib = match problem.theta.idx(p, i) {
                Some(th) if w != 0.0 => {
                    let (y_th, z_th) = match source {
                        // the read at theta = t uses the explicit-step
                        // convention (y_{i+1}, z_i), matching the driver
                        FeedbackSource::Own => {
                            (out.y.get(p, th.max(i + 1)), out.z.get(p, th))
                        }
                        FeedbackSource::Frozen(prev) => {
                            (prev.y.get(p, th.max(i + 1)), prev.z.get(p, th))
                        }
                    };
                    (problem.anticipation)(p, i, th, y_th, z_th) * w
                }
                _ => 0.0,
            };
            target.push(contrib);
        }
        let a_fit = reg.fitted(&target)?;

        // y_i = E[ y_{i+1} + h dt | F_i ] + A_i, assembled from the
        // continuation fit and the driver fit (the regression is linear
        // in its targets)
        target.clear();
        for p in 0..n_paths {
            let h = match source {
                FeedbackSource::Own => {
                    (problem.driver)(p, i, out.y.get(p, i + 1), out.z.get(p, i))
                }
                FeedbackSource::Frozen(prev) => {
                    (problem.driver)(p, i, prev.y.get(p, i + 1), prev.z.get(p, i))
                }
            };
            target.push(h * dt);
        }
        let h_fit = reg.fitted(&target)?;
        out.y
            .fill_node(i, |p| continuation[p] + h_fit[p] + a_fit[p]);
    }

    if let Some((path, step)) = out.y.first_non_finite().or(out.z.first_non_finite()) {
        return Err(SmpError::BlowUp { path, step });
    }
    Ok(out)
}

/// Direct backward recursion for the anticipated BSDE: one sweep in which
/// the driver is evaluated explicitly at `(y_{i+1}, z_i)` and anticipated
/// reads index the future rows already computed in this sweep.
pub fn solve_absde(
    problem: &AbsdeProblem,
    bundle: &BrownianBundle,
    cond: &ConditioningSet<'_>,
    basis: &RegressionBasis,
) -> Result<AdjointEnsemble> {
    backward_sweep(problem, bundle, cond, basis, FeedbackSource::Own)
}

/// Fixed-point iteration of the contraction mapping `(y, z) -> (Y, Z)`:
/// each sweep solves the linear backward equation with driver and
/// anticipation frozen on the previous pair. Returns the solution and the
/// sequence of weighted-norm gaps between consecutive sweeps.
pub fn fixed_point_solve(
    problem: &AbsdeProblem,
    bundle: &BrownianBundle,
    cond: &ConditioningSet<'_>,
    basis: &RegressionBasis,
    beta: f64,
    max_iterations: usize,
    tol: f64,
) -> Result<(AdjointEnsemble, Vec<f64>)> {
    if max_iterations == 0 {
        return Err(SmpError::Config("max_iterations must be at least 1".into()));
    }
    if !(tol >= 0.0) {
        return Err(SmpError::Config(format!("tol must be nonnegative, got {tol}")));
    }
    let mut prev = backward_sweep(
        problem,
        bundle,
        cond,
        basis,
        FeedbackSource::Frozen(&AdjointEnsemble::zeros(*bundle.grid(), bundle.n_paths())),
    )?;
    let mut gaps: Vec<f64> = Vec::new();
    for _ in 0..max_iterations {
        let next = backward_sweep(problem, bundle, cond, basis, FeedbackSource::Frozen(&prev))?;
        let gap = beta_norm_diff(&next, &prev, beta);
        gaps.push(gap);
        prev = next;
        if gap <= tol {
            return Ok((prev, gaps));
        }
        if gaps.len() >= 3 {
            let k = gaps.len();
            if gaps[k - 1] > gaps[k - 2] && gaps[k - 2] > gaps[k - 3] {
                let ratios: Vec<f64> = gaps.windows(2).map(|w| w[1] / w[0]).collect();
                return Err(SmpError::ContractionFailure { gaps, ratios });
            }
        }
    }
    Err(SmpError::NoConvergence {
        iterations: gaps.len(),
        gaps,
    })
}

/// Builds the adjoint ABSDE of the control problem along a candidate
/// optimal pair `(X*, u*)`:
///
///   driver        h(t, p, q) = b_x p + sigma_x q + f_x      (at t)
///   anticipation  l(theta)   = b_y p + sigma_y q + f_y      (at theta(t))
///   terminal      xi = g_x(X*_T)
///
/// with all coefficient partials frozen path-wise along the starred
/// trajectory. Contributions with `theta(t)` beyond the horizon vanish
/// through the `d theta` weights.
pub fn build_adjoint_problem(
    coeffs: &CoefficientSet,
    star: &StateEnsemble,
    star_control: &ControlProcess,
    theta: Arc<InverseDelayMap>,
) -> Result<AbsdeProblem> {
    let grid = star.grid;
    let n_nodes = grid.n_nodes();
    let n_paths = star.n_paths();

    let freeze = |kind: CoefKind, slot: Slot| -> Result<Arc<PathArray>> {
        let partial = coeffs.partial(kind, slot)?;
        let deterministic = star.values.is_broadcast()
            && star_control.values.is_broadcast()
            && star.delay.is_shared();
        let rows = if deterministic { 1 } else { n_paths };
        let mut data: Vec<Vec<f64>> = Vec::with_capacity(rows);
        for p in 0..rows {
            let mut row = Vec::with_capacity(n_nodes);
            for i in 0..n_nodes {
                let j = star.delay.idx(p, i);
                row.push(partial(
                    grid.node(i),
                    star.get(p, i),
                    star.get(p, j),
                    star_control.get(p, i),
                    star_control.get(p, j),
                ));
            }
            data.push(row);
        }
        Ok(Arc::new(if deterministic {
            PathArray::broadcast_row(n_paths, data.pop().unwrap())
        } else {
            PathArray::from_rows(data)
        }))
    };

    let bx = freeze(CoefKind::Drift, Slot::State)?;
    let sx = freeze(CoefKind::Diffusion, Slot::State)?;
    let fx = freeze(CoefKind::RunningCost, Slot::State)?;
    let by = freeze(CoefKind::Drift, Slot::DelayedState)?;
    let sy = freeze(CoefKind::Diffusion, Slot::DelayedState)?;
    let fy = freeze(CoefKind::RunningCost, Slot::DelayedState)?;
    let slope = coeffs.terminal_slope()?;
    let terminal: Vec<f64> = (0..n_paths)
        .map(|p| slope(star.get(p, grid.n_steps())))
        .collect();

    let driver: DriverFn = {
        let (bx, sx, fx) = (bx.clone(), sx.clone(), fx.clone());
        Arc::new(move |p, i, y, z| bx.get(p, i) * y + sx.get(p, i) * z + fx.get(p, i))
    };
    let anticipation: AnticipationFn = Arc::new(move |p, _i, th, y_th, z_th| {
        by.get(p, th) * y_th + sy.get(p, th) * z_th + fy.get(p, th)
    });

    Ok(AbsdeProblem {
        driver,
        anticipation,
        theta,
        terminal,
    })
}
