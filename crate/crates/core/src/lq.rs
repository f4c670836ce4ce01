//! Moving-average linear-quadratic control:
//!
//!   dX = (A X + B X_at + C u + P u_at) dt + (D X + F X_at + H u + N u_at) dW
//!   J  = 1/2 E [ int (Q X^2 + S X_at^2 + R u^2) dt + G X_T^2 ]
//!
//! with proportional delay `tau(t) = a t`. The optimal control solves the
//! coupled forward-backward system: adjoint pair `(p, q)` from the
//! anticipated backward equation, feedback
//! `u = -R^{-1} (C p + H q + anticipated P/N terms)`, iterated with
//! damping to a fixed point. A classical Riccati oracle covers the
//! delay-free reduction.

use crate::absde::{solve_absde, AbsdeProblem, AdjointEnsemble, AnticipationFn, DriverFn};
use crate::brownian::BrownianBundle;
use crate::coeffs::{CoefficientSet, Slot};
use crate::control::ControlProcess;
use crate::delay::{pseudo_inverse, realize_delay, DelayMap, DelaySpec, InverseDelayMap};
use crate::ensemble::{block_sum, mean_and_std_error, PathArray};
use crate::error::{Result, SmpError};
use crate::forward::{euler_maruyama, StateEnsemble};
use crate::grid::TimeGrid;
use crate::regression::{ConditioningSet, RegressionBasis, StepRegressor};
use crate::rng::{CounterRng, STREAM_PERTURBATION};
use std::sync::Arc;
use rayon::prelude::*;

/// Minimum admissible control weight: `R_t` must stay at or above this
/// floor so the feedback inversion is well posed.
pub const MIN_CONTROL_WEIGHT: f64 = 1e-8;

/// A scalar function of time: a constant or a polynomial in `t`.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeFn {
    Constant(f64),
    /// Coefficients in increasing degree: `c[0] + c[1] t + c[2] t^2 + ...`
    Polynomial(Vec<f64>),
}

impl TimeFn {
    pub fn zero() -> Self {
        TimeFn::Constant(0.0)
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeFn::Constant(c) => *c,
            TimeFn::Polynomial(cs) => cs.iter().rev().fold(0.0, |acc, c| acc * t + c),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            TimeFn::Constant(c) => *c == 0.0,
            TimeFn::Polynomial(cs) => cs.iter().all(|c| *c == 0.0),
        }
    }
}

/// Coefficients of the moving-average LQ problem.
#[derive(Debug, Clone)]
pub struct LqCoefficients {
    pub drift_state: TimeFn,            // A
    pub drift_delayed: TimeFn,          // B
    pub drift_control: TimeFn,          // C
    pub drift_delayed_control: TimeFn,  // P
    pub diffusion_state: TimeFn,        // D
    pub diffusion_delayed: TimeFn,      // F
    pub diffusion_control: TimeFn,      // H
    pub diffusion_delayed_control: TimeFn, // N
    pub state_weight: TimeFn,           // Q
    pub delayed_weight: TimeFn,         // S
    pub control_weight: TimeFn,         // R
    pub terminal_weight: f64,           // G
    /// Moving-average fraction `a` in `(0, 1)`.
    pub delay_fraction: f64,
    pub initial_state: f64,
}

impl LqCoefficients {
    /// All-zero template with unit control weight; callers override fields.
    pub fn template() -> Self {
        Self {
            drift_state: TimeFn::zero(),
            drift_delayed: TimeFn::zero(),
            drift_control: TimeFn::zero(),
            drift_delayed_control: TimeFn::zero(),
            diffusion_state: TimeFn::zero(),
            diffusion_delayed: TimeFn::zero(),
            diffusion_control: TimeFn::zero(),
            diffusion_delayed_control: TimeFn::zero(),
            state_weight: TimeFn::zero(),
            delayed_weight: TimeFn::zero(),
            control_weight: TimeFn::Constant(1.0),
            terminal_weight: 0.0,
            delay_fraction: 0.5,
            initial_state: 1.0,
        }
    }

    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        if !(self.delay_fraction > 0.0 && self.delay_fraction < 1.0) {
            return Err(SmpError::Config(format!(
                "delay fraction a must lie in (0,1), got {}",
                self.delay_fraction
            )));
        }
        if !(self.terminal_weight >= 0.0) {
            return Err(SmpError::Config(format!(
                "terminal weight G must be nonnegative, got {}",
                self.terminal_weight
            )));
        }
        for i in 0..grid.n_nodes() {
            let t = grid.node(i);
            let r = self.control_weight.eval(t);
            if !(r >= MIN_CONTROL_WEIGHT) {
                return Err(SmpError::Config(format!(
                    "control weight R({t}) = {r} below the floor {MIN_CONTROL_WEIGHT}"
                )));
            }
            if self.state_weight.eval(t) < 0.0 || self.delayed_weight.eval(t) < 0.0 {
                return Err(SmpError::Config(format!(
                    "cost weights Q, S must be nonnegative at t = {t}"
                )));
            }
        }
        Ok(())
    }

    /// All delay-coupling coefficients vanish on the grid.
    pub fn is_delay_free(&self) -> bool {
        self.drift_delayed.is_zero()
            && self.drift_delayed_control.is_zero()
            && self.diffusion_delayed.is_zero()
            && self.diffusion_delayed_control.is_zero()
            && self.delayed_weight.is_zero()
    }

    /// The equivalent general coefficient set with analytic partials.
    pub fn to_coefficient_set(&self) -> CoefficientSet {
        let a = self.drift_state.clone();
        let b = self.drift_delayed.clone();
        let c = self.drift_control.clone();
        let pp = self.drift_delayed_control.clone();
        let d = self.diffusion_state.clone();
        let f = self.diffusion_delayed.clone();
        let h = self.diffusion_control.clone();
        let n = self.diffusion_delayed_control.clone();
        let q = self.state_weight.clone();
        let s = self.delayed_weight.clone();
        let r = self.control_weight.clone();
        let g = self.terminal_weight;

        let builder = CoefficientSet::builder()
            .drift({
                let (a, b, c, pp) = (a.clone(), b.clone(), c.clone(), pp.clone());
                move |t, x, y, u, v| a.eval(t) * x + b.eval(t) * y + c.eval(t) * u + pp.eval(t) * v
            })
            .diffusion({
                let (d, f, h, n) = (d.clone(), f.clone(), h.clone(), n.clone());
                move |t, x, y, u, v| d.eval(t) * x + f.eval(t) * y + h.eval(t) * u + n.eval(t) * v
            })
            .running_cost({
                let (q, s, r) = (q.clone(), s.clone(), r.clone());
                move |t, x, y, u, _| {
                    0.5 * (q.eval(t) * x * x + s.eval(t) * y * y + r.eval(t) * u * u)
                }
            })
            .terminal_cost(move |x| 0.5 * g * x * x)
            .drift_partial(Slot::State, {
                let a = a.clone();
                move |t, _, _, _, _| a.eval(t)
            })
            .drift_partial(Slot::DelayedState, {
                let b = b.clone();
                move |t, _, _, _, _| b.eval(t)
            })
            .drift_partial(Slot::Control, {
                let c = c.clone();
                move |t, _, _, _, _| c.eval(t)
            })
            .drift_partial(Slot::DelayedControl, {
                let pp = pp.clone();
                move |t, _, _, _, _| pp.eval(t)
            })
            .diffusion_partial(Slot::State, {
                let d = d.clone();
                move |t, _, _, _, _| d.eval(t)
            })
            .diffusion_partial(Slot::DelayedState, {
                let f = f.clone();
                move |t, _, _, _, _| f.eval(t)
            })
            .diffusion_partial(Slot::Control, {
                let h = h.clone();
                move |t, _, _, _, _| h.eval(t)
            })
            .diffusion_partial(Slot::DelayedControl, {
                let n = n.clone();
                move |t, _, _, _, _| n.eval(t)
            })
            .cost_partial(Slot::State, {
                let q = q.clone();
                move |t, x, _, _, _| q.eval(t) * x
            })
            .cost_partial(Slot::DelayedState, {
                let s = s.clone();
                move |t, _, y, _, _| s.eval(t) * y
            })
            .cost_partial(Slot::Control, {
                let r = r.clone();
                move |t, _, _, u, _| r.eval(t) * u
            })
            .cost_partial(Slot::DelayedControl, |_, _, _, _, _| 0.0)
            .terminal_slope(move |x| g * x);
        builder.build()
    }

    /// Realizes the proportional delay map of the problem.
    pub fn delay_map(&self, grid: &TimeGrid, n_paths: usize) -> Result<DelayMap> {
        realize_delay(
            &DelaySpec::Proportional {
                a: self.delay_fraction,
            },
            grid,
            n_paths,
            0,
        )
    }
}

/// Per-node tables of the coefficient time functions.
struct LqTables {
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    p: Vec<f64>,
    d: Vec<f64>,
    f: Vec<f64>,
    h: Vec<f64>,
    n: Vec<f64>,
    q: Vec<f64>,
    s: Vec<f64>,
    r: Vec<f64>,
}

impl LqTables {
    fn build(lq: &LqCoefficients, grid: &TimeGrid) -> Self {
        let tab = |f: &TimeFn| -> Vec<f64> { grid.nodes().map(|t| f.eval(t)).collect() };
        Self {
            a: tab(&lq.drift_state),
            b: tab(&lq.drift_delayed),
            c: tab(&lq.drift_control),
            p: tab(&lq.drift_delayed_control),
            d: tab(&lq.diffusion_state),
            f: tab(&lq.diffusion_delayed),
            h: tab(&lq.diffusion_control),
            n: tab(&lq.diffusion_delayed_control),
            q: tab(&lq.state_weight),
            s: tab(&lq.delayed_weight),
            r: tab(&lq.control_weight),
        }
    }
}

/// Forward dynamics of the LQ problem under a given control; delegates to
/// the delayed Euler scheme with the proportional delay map.
pub fn lq_forward(
    lq: &LqCoefficients,
    control: Arc<ControlProcess>,
    bundle: &BrownianBundle,
) -> Result<StateEnsemble> {
    lq.validate(bundle.grid())?;
    let delay = Arc::new(lq.delay_map(bundle.grid(), bundle.n_paths())?);
    let coeffs = lq.to_coefficient_set();
    euler_maruyama(&coeffs, control, delay, bundle, lq.initial_state)
}

/// Cost functional of the LQ problem (note the 1/2 factor), with its Monte
/// Carlo standard error.
pub fn lq_cost(
    lq: &LqCoefficients,
    state: &StateEnsemble,
    control: &ControlProcess,
) -> (f64, f64) {
    let costs = lq_cost_paths(lq, state, control);
    mean_and_std_error(costs.len(), &|p| costs[p])
}

fn lq_cost_paths(lq: &LqCoefficients, state: &StateEnsemble, control: &ControlProcess) -> Vec<f64> {
    let grid = state.grid;
    let dt = grid.dt();
    let n_steps = grid.n_steps();
    let tables = LqTables::build(lq, &grid);
    let g = lq.terminal_weight;
    (0..state.n_paths())
        .map(|p| {
            let mut acc = 0.0;
            for i in 0..n_steps {
                let j = state.delay.idx(p, i);
                let x = state.get(p, i);
                let y = state.get(p, j);
                let u = control.get(p, i);
                // same expression shape as the general running cost
                acc += 0.5 * (tables.q[i] * x * x + tables.s[i] * y * y + tables.r[i] * u * u) * dt;
            }
            let xt = state.get(p, n_steps);
            acc + 0.5 * g * xt * xt
        })
        .collect()
}

/// Adjoint pair of the LQ problem along a state trajectory, solved as an
/// anticipated backward equation with the LQ-specialized driver
/// `A p + D q + Q X*` and anticipation `B(theta) p + F(theta) q + S(theta) X*_t`,
/// cut off past `a T` through the `d theta` weights.
pub fn lq_adjoint(
    lq: &LqCoefficients,
    star: &StateEnsemble,
    bundle: &BrownianBundle,
    basis: &RegressionBasis,
) -> Result<AdjointEnsemble> {
    let w = bundle.cumulative();
    let theta = Arc::new(pseudo_inverse(&star.delay, &star.grid));
    lq_adjoint_with(lq, star, bundle, &w, theta, basis)
}

/// The LQ adjoint equation as an anticipated BSDE along a trajectory:
/// driver `A p + D q + Q X*_t`, anticipation
/// `B(theta) p_theta + F(theta) q_theta + S(theta) X*_t`, terminal
/// `G X*_T`.
pub fn lq_adjoint_problem(
    lq: &LqCoefficients,
    star: &StateEnsemble,
    theta: Arc<InverseDelayMap>,
) -> AbsdeProblem {
    let grid = star.grid;
    let tables = Arc::new(LqTables::build(lq, &grid));
    let star_values = star.values.clone();
    let n_steps = grid.n_steps();

    let driver: DriverFn = {
        let tables = tables.clone();
        let star_values = star_values.clone();
        Arc::new(move |p, i, y, z| {
            tables.a[i] * y + tables.d[i] * z + tables.q[i] * star_values.get(p, i)
        })
    };
    let anticipation: AnticipationFn = {
        let tables = tables.clone();
        let star_values = star_values.clone();
        Arc::new(move |p, i, th, y_th, z_th| {
            // the delayed-cost derivative reads the state at the CURRENT
            // time: S(theta) X*_t through the substitution
            tables.b[th] * y_th + tables.f[th] * z_th + tables.s[th] * star_values.get(p, i)
        })
    };
    let g = lq.terminal_weight;
    let terminal: Vec<f64> = (0..star.n_paths())
        .map(|p| g * star_values.get(p, n_steps))
        .collect();

    AbsdeProblem {
        driver,
        anticipation,
        theta,
        terminal,
    }
}

fn lq_adjoint_with(
    lq: &LqCoefficients,
    star: &StateEnsemble,
    bundle: &BrownianBundle,
    brownian: &PathArray,
    theta: Arc<InverseDelayMap>,
    basis: &RegressionBasis,
) -> Result<AdjointEnsemble> {
    let problem = lq_adjoint_problem(lq, star, theta);
    let cond = ConditioningSet::state_and_brownian(&star.values, brownian);
    solve_absde(&problem, bundle, &cond, basis)
}

/// Feedback map `u = -R^{-1} (C p + H q + E[ (P(theta) p_theta +
/// N(theta) q_theta) dtheta/dt | F_t ])`, the stationarity condition of
/// the Hamiltonian solved for the control.
pub fn lq_feedback(
    lq: &LqCoefficients,
    star: &StateEnsemble,
    adjoint: &AdjointEnsemble,
    brownian: &PathArray,
    theta: &InverseDelayMap,
    basis: &RegressionBasis,
) -> Result<ControlProcess> {
    let grid = star.grid;
    let n_steps = grid.n_steps();
    let n_paths = star.n_paths();
    let dt = grid.dt();
    let tables = LqTables::build(lq, &grid);
    if let Some(r_min) = tables.r.iter().copied().reduce(f64::min) {
        if !(r_min >= MIN_CONTROL_WEIGHT) {
            return Err(SmpError::Config(format!(
                "control weight reaches {r_min}, below the floor {MIN_CONTROL_WEIGHT}"
            )));
        }
    }

    let cond = ConditioningSet::state_and_brownian(&star.values, brownian);
    let n_vars = cond.n_vars();
    let mut reg = StepRegressor::new(*basis);
    let mut raw = Vec::new();
    let mut target = Vec::with_capacity(n_paths);
    let mut values = PathArray::zeros(n_paths, n_steps + 1);

    let anticipated_coupling =
        !lq.drift_delayed_control.is_zero() || !lq.diffusion_delayed_control.is_zero();

    for i in 0..=n_steps {
        let anticipated: Vec<f64> = if i < n_steps && anticipated_coupling {
            target.clear();
            for p in 0..n_paths {
                let w = theta.weight(p, i);
                let contrib = match theta.idx(p, i) {
                    Some(th) if w != 0.0 => {
                        (tables.p[th] * adjoint.y.get(p, th)
                            + tables.n[th] * adjoint.z.get(p, th))
                            * w
                            / dt
                    }
                    _ => 0.0,
                };
                target.push(contrib);
            }
            if target.iter().all(|&v| v == 0.0) {
                vec![0.0; n_paths]
            } else {
                cond.raw_at_node(i, n_paths, &mut raw);
                reg.prepare(&raw, n_paths, n_vars)?;
                reg.fitted(&target)?
            }
        } else {
            vec![0.0; n_paths]
        };
        values.fill_node(i, |p| {
            -(tables.c[i] * adjoint.y.get(p, i)
                + tables.h[i] * adjoint.z.get(p, i)
                + anticipated[p])
                / tables.r[i]
        });
    }
    Ok(ControlProcess::unbounded(values))
}

/// Complete LQ solution with convergence diagnostics.
#[derive(Debug, Clone)]
pub struct LqSolution {
    pub control: Arc<ControlProcess>,
    pub state: StateEnsemble,
    pub adjoint: AdjointEnsemble,
    pub cost: f64,
    pub cost_std_error: f64,
    /// Sup-node L2 control change per fixed-point iteration.
    pub trace: Vec<f64>,
    /// Cost estimate of each iterate.
    pub cost_trace: Vec<f64>,
    pub converged: bool,
}

/// Damped fixed-point iteration of forward dynamics, adjoint solve and
/// feedback map. Stops when the sup-node L2 control change drops to `tol`.
pub fn lq_solve(
    lq: &LqCoefficients,
    bundle: &BrownianBundle,
    basis: &RegressionBasis,
    max_iterations: usize,
    tol: f64,
    damping: f64,
) -> Result<LqSolution> {
    let grid = *bundle.grid();
    lq.validate(&grid)?;
    if max_iterations == 0 {
        return Err(SmpError::Config("max_iterations must be at least 1".into()));
    }
    if !(tol > 0.0) {
        return Err(SmpError::Config(format!("tol must be positive, got {tol}")));
    }
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(SmpError::Config(format!(
            "damping must lie in (0,1], got {damping}"
        )));
    }

    let n_paths = bundle.n_paths();
    let coeffs = lq.to_coefficient_set();
    let delay = Arc::new(lq.delay_map(&grid, n_paths)?);
    let theta = Arc::new(pseudo_inverse(&delay, &grid));
    let brownian = bundle.cumulative();

    let mut control = Arc::new(ControlProcess::constant(&grid, n_paths, 0.0));
    lq_solve_from(
        lq,
        &coeffs,
        bundle,
        &delay,
        &theta,
        &brownian,
        basis,
        &mut control,
        max_iterations,
        tol,
        damping,
    )
}

/// The fixed-point loop with an explicit initial control guess; multi-start
/// uniqueness checks call this directly.
#[allow(clippy::too_many_arguments)]
pub fn lq_solve_from(
    lq: &LqCoefficients,
    coeffs: &CoefficientSet,
    bundle: &BrownianBundle,
    delay: &Arc<DelayMap>,
    theta: &Arc<InverseDelayMap>,
    brownian: &PathArray,
    basis: &RegressionBasis,
    control: &mut Arc<ControlProcess>,
    max_iterations: usize,
    tol: f64,
    damping: f64,
) -> Result<LqSolution> {
    let grid = *bundle.grid();
    let n_paths = bundle.n_paths();
    let n_nodes = grid.n_nodes();
    let mut trace: Vec<f64> = Vec::new();
    let mut cost_trace: Vec<f64> = Vec::new();
    let mut converged = false;

    for _ in 0..max_iterations {
        let state = euler_maruyama(
            coeffs,
            control.clone(),
            delay.clone(),
            bundle,
            lq.initial_state,
        )?;
        let adjoint = lq_adjoint_with(lq, &state, bundle, brownian, theta.clone(), basis)?;
        let feedback = lq_feedback(lq, &state, &adjoint, brownian, theta, basis)?;
        cost_trace.push(lq_cost(lq, &state, control).0);

        // damped update u <- (1 - rho) u + rho u_new
        let mut next = PathArray::zeros(n_paths, n_nodes);
        next.rows_mut().enumerate().for_each(|(p, row)| {
            for (i, slot) in row.iter_mut().enumerate() {
                *slot =
                    (1.0 - damping) * control.get(p, i) + damping * feedback.get(p, i);
            }
        });
        let mut change = 0.0f64;
        for i in 0..n_nodes {
            let ms = block_sum(n_paths, &|p| {
                let d = next.get(p, i) - control.get(p, i);
                d * d
            }) / n_paths as f64;
            change = change.max(ms.sqrt());
        }
        // Banach bound: distance to the limit is at most
        // change * ratio / (1 - ratio), so stopping at
        // change <= tol * (1 - ratio) leaves the iterate within tol
        let ratio_est = match trace.last() {
            Some(prev) if *prev > 0.0 => (change / prev).clamp(0.0, 0.9),
            _ => 0.9,
        };
        trace.push(change);
        *control = Arc::new(ControlProcess::unbounded(next));
        if change <= tol * (1.0 - ratio_est) {
            converged = true;
            break;
        }
        if trace.len() >= 3 {
            let k = trace.len();
            let min_seen = trace.iter().copied().fold(f64::INFINITY, f64::min);
            // three consecutive rises well above both the tolerance and the
            // best change seen: the iteration is genuinely diverging
            if trace[k - 1] > trace[k - 2]
                && trace[k - 2] > trace[k - 3]
                && trace[k - 1] > 100.0 * tol
                && trace[k - 1] > 10.0 * min_seen
            {
                let ratios: Vec<f64> = trace.windows(2).map(|w| w[1] / w[0]).collect();
                return Err(SmpError::ContractionFailure {
                    gaps: trace,
                    ratios,
                });
            }
        }
    }
    if !converged {
        return Err(SmpError::NoConvergence {
            iterations: trace.len(),
            gaps: trace,
        });
    }

    // consistent final triple along the converged control
    let state = euler_maruyama(
        coeffs,
        control.clone(),
        delay.clone(),
        bundle,
        lq.initial_state,
    )?;
    let adjoint = lq_adjoint_with(lq, &state, bundle, brownian, theta.clone(), basis)?;
    let (cost, cost_std_error) = lq_cost(lq, &state, control);
    Ok(LqSolution {
        control: control.clone(),
        state,
        adjoint,
        cost,
        cost_std_error,
        trace,
        cost_trace,
        converged,
    })
}

/// Sup-node L2 norm of the feedback residual
/// `R u* + C p + H q + anticipated terms` along a solved triple; the
/// stationarity certificate of the fixed point.
pub fn lq_feedback_residual(
    lq: &LqCoefficients,
    solution: &LqSolution,
    bundle: &BrownianBundle,
    basis: &RegressionBasis,
) -> Result<f64> {
    let grid = solution.state.grid;
    let brownian = bundle.cumulative();
    let theta = pseudo_inverse(&solution.state.delay, &grid);
    let fresh = lq_feedback(
        lq,
        &solution.state,
        &solution.adjoint,
        &brownian,
        &theta,
        basis,
    )?;
    let tables = LqTables::build(lq, &grid);
    let n_paths = solution.state.n_paths();
    let mut sup = 0.0f64;
    for i in 0..grid.n_nodes() {
        let ms = block_sum(n_paths, &|p| {
            let r = tables.r[i] * (solution.control.get(p, i) - fresh.get(p, i));
            r * r
        }) / n_paths as f64;
        sup = sup.max(ms.sqrt());
    }
    Ok(sup)
}

/// Classical scalar Riccati oracle for the delay-free reduction
/// (`B = P = F = N = S = 0`):
///
///   -K' = Q + 2 A K + D^2 K - K^2 (C + D H)^2 / (R + H^2 K),  K(T) = G,
///
/// integrated backward with explicit first-order stepping on a refined
/// grid. The optimal feedback is `u = -gain(t) x` with
/// `gain = K (C + D H) / (R + H^2 K)`; the derivation is the standard
/// completion of squares in the scalar Hamilton-Jacobi-Bellman equation
/// with state- and control-dependent noise.
#[derive(Debug, Clone)]
pub struct RiccatiReference {
    grid: TimeGrid,
    /// Riccati solution at the main grid nodes.
    k_nodes: Vec<f64>,
    /// Feedback gains at the main grid nodes.
    gains: Vec<f64>,
}

impl RiccatiReference {
    #[inline]
    pub fn value_at(&self, node: usize) -> f64 {
        self.k_nodes[node]
    }

    #[inline]
    pub fn gain_at(&self, node: usize) -> f64 {
        self.gains[node]
    }

    /// State feedback along a simulated ensemble.
    pub fn control_for(&self, state: &StateEnsemble) -> ControlProcess {
        let n_paths = state.n_paths();
        let n_nodes = self.grid.n_nodes();
        let mut values = PathArray::zeros(n_paths, n_nodes);
        values.rows_mut().enumerate().for_each(|(p, row)| {
            for (i, slot) in row.iter_mut().enumerate() {
                *slot = -self.gains[i] * state.get(p, i);
            }
        });
        ControlProcess::unbounded(values)
    }
}

/// Solves the scalar Riccati equation for the delay-free problem on a
/// sub-grid with `refine` steps per main grid step.
pub fn riccati_reference(
    lq: &LqCoefficients,
    grid: &TimeGrid,
    refine: usize,
) -> Result<RiccatiReference> {
    lq.validate(grid)?;
    if !lq.is_delay_free() {
        return Err(SmpError::Config(
            "Riccati oracle requires all delay-coupling coefficients (B, P, F, N, S) to vanish"
                .into(),
        ));
    }
    if refine == 0 {
        return Err(SmpError::Config("refine must be at least 1".into()));
    }
    let n_steps = grid.n_steps();
    let n_fine = n_steps * refine;
    let h = grid.horizon() / n_fine as f64;

    let rhs = |t: f64, k: f64| -> f64 {
        let a = lq.drift_state.eval(t);
        let c = lq.drift_control.eval(t);
        let d = lq.diffusion_state.eval(t);
        let hh = lq.diffusion_control.eval(t);
        let q = lq.state_weight.eval(t);
        let r = lq.control_weight.eval(t);
        let coupling = c + d * hh;
        q + 2.0 * a * k + d * d * k - k * k * coupling * coupling / (r + hh * hh * k)
    };

    let mut k = lq.terminal_weight;
    let mut k_nodes = vec![0.0f64; n_steps + 1];
    k_nodes[n_steps] = k;
    for j in (0..n_fine).rev() {
        let t = (j + 1) as f64 * h;
        k += h * rhs(t, k);
        if !k.is_finite() {
            return Err(SmpError::BlowUp { path: 0, step: j });
        }
        if j % refine == 0 {
            k_nodes[j / refine] = k;
        }
    }
    let gains: Vec<f64> = (0..=n_steps)
        .map(|i| {
            let t = grid.node(i);
            let c = lq.drift_control.eval(t);
            let d = lq.diffusion_state.eval(t);
            let hh = lq.diffusion_control.eval(t);
            let r = lq.control_weight.eval(t);
            let k = k_nodes[i];
            k * (c + d * hh) / (r + hh * hh * k)
        })
        .collect();
    Ok(RiccatiReference {
        grid: *grid,
        k_nodes,
        gains,
    })
}

/// One random perturbation of the certificate.
#[derive(Debug, Clone)]
pub struct PerturbationCheck {
    pub eps: f64,
    /// `J(u* + eps v) - J(u*)` under common noise.
    pub cost_gap: f64,
    pub std_error: f64,
    pub passed: bool,
}

/// Optimality certificate of a solved LQ problem.
#[derive(Debug, Clone)]
pub struct CertificateReport {
    pub perturbations: Vec<PerturbationCheck>,
    /// Smallest cost gap across perturbations.
    pub min_cost_gap: f64,
    /// Relative residual of the midpoint convexity identity
    /// `J(u1) + J(u2) - 2 J((u1+u2)/2) = E int [Q dx^2 + S dy^2 + R du^2] dt + E G dx_T^2`
    /// with halved differences, exact path-wise under common noise.
    pub midpoint_residual: f64,
    /// The strict convexity gap `(min R / 4) E int (u1 - u2)^2 dt` is
    /// dominated by the midpoint gap.
    pub convexity_gap_ok: bool,
    pub passed: bool,
}

/// Verifies `J(u* + eps v) >= J(u*)` (up to three standard errors, common
/// noise) for random admissible directions, and the path-wise midpoint
/// convexity identity.
pub fn optimality_certificate(
    lq: &LqCoefficients,
    solution: &LqSolution,
    bundle: &BrownianBundle,
    n_perturbations: usize,
    eps_list: &[f64],
    seed: u64,
) -> Result<CertificateReport> {
    if n_perturbations == 0 {
        return Err(SmpError::Config("n_perturbations must be at least 1".into()));
    }
    let grid = *bundle.grid();
    let n_paths = bundle.n_paths();
    let delay = solution.state.delay.clone();
    let coeffs = lq.to_coefficient_set();
    let star_costs = lq_cost_paths(lq, &solution.state, &solution.control);

    let forward = |control: Arc<ControlProcess>| -> Result<(StateEnsemble, Vec<f64>)> {
        let state = euler_maruyama(&coeffs, control, delay.clone(), bundle, lq.initial_state)?;
        let costs = lq_cost_paths(lq, &state, &state.control);
        Ok((state, costs))
    };

    let mut perturbations = Vec::with_capacity(n_perturbations * eps_list.len());
    let mut min_gap = f64::INFINITY;
    let mut first_direction: Option<ControlProcess> = None;
    for c in 0..n_perturbations {
        let mut rng =
            CounterRng::from_stream(seed ^ (c as u64).wrapping_mul(0x9E37_79B9), STREAM_PERTURBATION, 0);
        let row: Vec<f64> = (0..grid.n_nodes()).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let direction =
            ControlProcess::unbounded(PathArray::broadcast_row(n_paths, row));
        if first_direction.is_none() {
            first_direction = Some(direction.clone());
        }
        for &eps in eps_list {
            let perturbed = Arc::new(solution.control.shifted(&direction, eps));
            let (_, costs) = forward(perturbed)?;
            let (gap, se) = mean_and_std_error(n_paths, &|p| costs[p] - star_costs[p]);
            let passed = gap >= -3.0 * se;
            min_gap = min_gap.min(gap);
            perturbations.push(PerturbationCheck {
                eps,
                cost_gap: gap,
                std_error: se,
                passed,
            });
        }
    }

    // midpoint identity along u1 = u*, u2 = u* + v
    let v = first_direction.unwrap();
    let u2 = Arc::new(solution.control.shifted(&v, 1.0));
    let u_mid = Arc::new(solution.control.shifted(&v, 0.5));
    let (x2, costs2) = forward(u2.clone())?;
    let (_x_mid, costs_mid) = forward(u_mid)?;
    let x1 = &solution.state;
    let tables = LqTables::build(lq, &grid);
    let dt = grid.dt();
    let n_steps = grid.n_steps();

    let mut max_abs_residual = 0.0f64;
    let mut mean_rhs = 0.0f64;
    let mut mean_quad_control = 0.0f64;
    let mut mean_lhs = 0.0f64;
    let r_min = tables.r.iter().copied().fold(f64::INFINITY, f64::min);
    for p in 0..n_paths {
        let lhs = star_costs[p] + costs2[p] - 2.0 * costs_mid[p];
        let mut rhs = 0.0;
        let mut quad_u = 0.0;
        for i in 0..n_steps {
            let j = delay.idx(p, i);
            let dx = 0.5 * (x1.get(p, i) - x2.get(p, i));
            let dy = 0.5 * (x1.get(p, j) - x2.get(p, j));
            let du = 0.5 * (solution.control.get(p, i) - u2.get(p, i));
            rhs += (tables.q[i] * dx * dx + tables.s[i] * dy * dy + tables.r[i] * du * du) * dt;
            quad_u += (solution.control.get(p, i) - u2.get(p, i)).powi(2) * dt;
        }
        let dxt = 0.5 * (x1.get(p, n_steps) - x2.get(p, n_steps));
        rhs += lq.terminal_weight * dxt * dxt;
        max_abs_residual = max_abs_residual.max((lhs - rhs).abs());
        mean_rhs += rhs;
        mean_lhs += lhs;
        mean_quad_control += quad_u;
    }
    mean_rhs /= n_paths as f64;
    mean_lhs /= n_paths as f64;
    mean_quad_control /= n_paths as f64;
    let midpoint_residual = max_abs_residual / mean_rhs.abs().max(1e-300);
    let convexity_gap_ok = mean_lhs + 1e-12 >= 0.25 * r_min * mean_quad_control;

    let passed = perturbations.iter().all(|p| p.passed)
        && midpoint_residual <= 1e-10
        && convexity_gap_ok;
    Ok(CertificateReport {
        perturbations,
        min_cost_gap: min_gap,
        midpoint_residual,
        convexity_gap_ok,
        passed,
    })
}
