//! Maximum-principle verification layer: Hamiltonian, cost functional,
//! variational (first-order sensitivity) equation, adjoint-based and
//! finite-difference Gateaux derivatives, stationarity residuals and the
//! variational-inequality check.

use crate::absde::AdjointEnsemble;
use crate::brownian::BrownianBundle;
use crate::coeffs::{CoefKind, CoefficientSet, DynCoef, Slot};
use crate::control::ControlProcess;
use crate::delay::{DelayMap, InverseDelayMap};
use crate::ensemble::{block_sum, mean_and_std_error, PathArray};
use crate::error::{Result, SmpError};
use crate::forward::{euler_maruyama, StateEnsemble};
use crate::grid::TimeGrid;
use crate::regression::{ConditioningSet, RegressionBasis, StepRegressor};
use crate::rng::{CounterRng, STREAM_CANDIDATE};
use std::sync::Arc;

/// Pointwise Hamiltonian `H = b p + sigma q + f`.
#[inline]
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    coeffs: &CoefficientSet,
    t: f64,
    x: f64,
    delayed_x: f64,
    u: f64,
    delayed_u: f64,
    adjoint_y: f64,
    adjoint_z: f64,
) -> f64 {
    (coeffs.drift)(t, x, delayed_x, u, delayed_u) * adjoint_y
        + (coeffs.diffusion)(t, x, delayed_x, u, delayed_u) * adjoint_z
        + (coeffs.running_cost)(t, x, delayed_x, u, delayed_u)
}

/// Per-path cost `sum_i f(t_i, ...) dt + g(X_T)` (left Riemann sum).
pub fn cost_paths(
    coeffs: &CoefficientSet,
    state: &StateEnsemble,
    control: &ControlProcess,
) -> Vec<f64> {
    let grid = state.grid;
    let dt = grid.dt();
    let n_steps = grid.n_steps();
    let delay = &state.delay;
    (0..state.n_paths())
        .map(|p| {
            let mut acc = 0.0;
            for i in 0..n_steps {
                let j = delay.idx(p, i);
                acc += (coeffs.running_cost)(
                    grid.node(i),
                    state.get(p, i),
                    state.get(p, j),
                    control.get(p, i),
                    control.get(p, j),
                ) * dt;
            }
            acc + (coeffs.terminal_cost)(state.get(p, n_steps))
        })
        .collect()
}

/// Monte Carlo estimate of the cost functional with its standard error.
pub fn cost_functional(
    coeffs: &CoefficientSet,
    state: &StateEnsemble,
    control: &ControlProcess,
) -> (f64, f64) {
    let costs = cost_paths(coeffs, state, control);
    mean_and_std_error(costs.len(), &|p| costs[p])
}

/// First-order sensitivity of the state to a control perturbation: the
/// linear delayed SDE driven by the direction process, started at zero.
#[derive(Debug, Clone)]
pub struct VariationalEnsemble {
    pub values: PathArray,
    pub grid: TimeGrid,
}

pub fn variational_solve(
    coeffs: &CoefficientSet,
    star: &StateEnsemble,
    star_control: &ControlProcess,
    direction: &ControlProcess,
    bundle: &BrownianBundle,
) -> Result<VariationalEnsemble> {
    let grid = star.grid;
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let n_paths = star.n_paths();
    let delay = star.delay.clone();

    let bx = coeffs.partial(CoefKind::Drift, Slot::State)?;
    let by = coeffs.partial(CoefKind::Drift, Slot::DelayedState)?;
    let bu = coeffs.partial(CoefKind::Drift, Slot::Control)?;
    let bv = coeffs.partial(CoefKind::Drift, Slot::DelayedControl)?;
    let sx = coeffs.partial(CoefKind::Diffusion, Slot::State)?;
    let sy = coeffs.partial(CoefKind::Diffusion, Slot::DelayedState)?;
    let su = coeffs.partial(CoefKind::Diffusion, Slot::Control)?;
    let sv = coeffs.partial(CoefKind::Diffusion, Slot::DelayedControl)?;

    let mut values = PathArray::zeros(n_paths, n_steps + 1);
    let fails: Vec<Option<(usize, usize)>> = {
        use rayon::prelude::*;
        values
            .rows_mut()
            .enumerate()
            .map(|(p, row)| {
                row[0] = 0.0;
                for i in 0..n_steps {
                    let t = grid.node(i);
                    let j = delay.idx(p, i);
                    let args = (
                        t,
                        star.get(p, i),
                        star.get(p, j),
                        star_control.get(p, i),
                        star_control.get(p, j),
                    );
                    let vi = row[i];
                    let vd = row[j];
                    let dir = direction.get(p, i);
                    let dir_d = direction.get(p, j);
                    let drift = bx(args.0, args.1, args.2, args.3, args.4) * vi
                        + by(args.0, args.1, args.2, args.3, args.4) * vd
                        + bu(args.0, args.1, args.2, args.3, args.4) * dir
                        + bv(args.0, args.1, args.2, args.3, args.4) * dir_d;
                    let diffusion = sx(args.0, args.1, args.2, args.3, args.4) * vi
                        + sy(args.0, args.1, args.2, args.3, args.4) * vd
                        + su(args.0, args.1, args.2, args.3, args.4) * dir
                        + sv(args.0, args.1, args.2, args.3, args.4) * dir_d;
                    let next = vi + drift * dt + diffusion * bundle.increment(p, i);
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
    Ok(VariationalEnsemble { values, grid })
}

struct HamiltonianPartials {
    bu: DynCoef,
    bv: DynCoef,
    su: DynCoef,
    sv: DynCoef,
    fu: DynCoef,
    fv: DynCoef,
}

impl HamiltonianPartials {
    fn resolve(coeffs: &CoefficientSet) -> Result<Self> {
        Ok(Self {
            bu: coeffs.partial(CoefKind::Drift, Slot::Control)?,
            bv: coeffs.partial(CoefKind::Drift, Slot::DelayedControl)?,
            su: coeffs.partial(CoefKind::Diffusion, Slot::Control)?,
            sv: coeffs.partial(CoefKind::Diffusion, Slot::DelayedControl)?,
            fu: coeffs.partial(CoefKind::RunningCost, Slot::Control)?,
            fv: coeffs.partial(CoefKind::RunningCost, Slot::DelayedControl)?,
        })
    }

    /// `H_u` along the starred trajectory at `(path, node)`.
    fn h_u(
        &self,
        grid: &TimeGrid,
        star: &StateEnsemble,
        control: &ControlProcess,
        adjoint: &AdjointEnsemble,
        p: usize,
        i: usize,
    ) -> f64 {
        let j = star.delay.idx(p, i);
        let (t, x, xd, u, ud) = (
            grid.node(i),
            star.get(p, i),
            star.get(p, j),
            control.get(p, i),
            control.get(p, j),
        );
        (self.bu)(t, x, xd, u, ud) * adjoint.y.get(p, i)
            + (self.su)(t, x, xd, u, ud) * adjoint.z.get(p, i)
            + (self.fu)(t, x, xd, u, ud)
    }

    /// `H_v` along the starred trajectory at `(path, node)`.
    fn h_v(
        &self,
        grid: &TimeGrid,
        star: &StateEnsemble,
        control: &ControlProcess,
        adjoint: &AdjointEnsemble,
        p: usize,
        i: usize,
    ) -> f64 {
        let j = star.delay.idx(p, i);
        let (t, x, xd, u, ud) = (
            grid.node(i),
            star.get(p, i),
            star.get(p, j),
            control.get(p, i),
            control.get(p, j),
        );
        (self.bv)(t, x, xd, u, ud) * adjoint.y.get(p, i)
            + (self.sv)(t, x, xd, u, ud) * adjoint.z.get(p, i)
            + (self.fv)(t, x, xd, u, ud)
    }
}

/// Adjoint-based Gateaux derivative of the cost in a direction `v`,
/// evaluated in the form `E int [H_u v_t + H_v v_tau] dt`, which pairs the
/// delayed sensitivity directly with the delayed control read. Returns the
/// estimate and its Monte Carlo standard error.
pub fn gateaux_adjoint(
    coeffs: &CoefficientSet,
    star: &StateEnsemble,
    star_control: &ControlProcess,
    direction: &ControlProcess,
    adjoint: &AdjointEnsemble,
) -> Result<(f64, f64)> {
    let partials = HamiltonianPartials::resolve(coeffs)?;
    let grid = star.grid;
    let dt = grid.dt();
    let n_steps = grid.n_steps();
    let n_paths = star.n_paths();
    let per_path = |p: usize| -> f64 {
        let mut acc = 0.0;
        for i in 0..n_steps {
            let j = star.delay.idx(p, i);
            acc += partials.h_u(&grid, star, star_control, adjoint, p, i) * direction.get(p, i);
            acc += partials.h_v(&grid, star, star_control, adjoint, p, i) * direction.get(p, j);
        }
        acc * dt
    };
    Ok(mean_and_std_error(n_paths, &per_path))
}

/// Diagnostic form of the adjoint Gateaux derivative after the change of
/// variables: the `H_v` term is read at `theta(t)` and weighted by the
/// discrete `d theta` measure. Agrees with [`gateaux_adjoint`] to the
/// discretization order.
pub fn gateaux_anticipated(
    coeffs: &CoefficientSet,
    star: &StateEnsemble,
    star_control: &ControlProcess,
    direction: &ControlProcess,
    adjoint: &AdjointEnsemble,
    theta: &InverseDelayMap,
) -> Result<(f64, f64)> {
    let partials = HamiltonianPartials::resolve(coeffs)?;
    let grid = star.grid;
    let dt = grid.dt();
    let n_steps = grid.n_steps();
    let n_paths = star.n_paths();
    let per_path = |p: usize| -> f64 {
        let mut acc = 0.0;
        for i in 0..n_steps {
            acc += partials.h_u(&grid, star, star_control, adjoint, p, i)
                * direction.get(p, i)
                * dt;
            let w = theta.weight(p, i);
            if w != 0.0 {
                if let Some(th) = theta.idx(p, i) {
                    acc += partials.h_v(&grid, star, star_control, adjoint, p, th)
                        * direction.get(p, i)
                        * w;
                }
            }
        }
        acc
    };
    Ok(mean_and_std_error(n_paths, &per_path))
}

/// Central-difference Gateaux oracle with common random numbers.
#[derive(Debug, Clone)]
pub struct FdEstimate {
    /// Richardson-extrapolated derivative (the plain central difference
    /// when only one step size is given).
    pub value: f64,
    /// Spread between the two finest central differences.
    pub spread: f64,
    /// Monte Carlo standard error of the finest central difference.
    pub std_error: f64,
    /// `(eps, central difference)` per step size.
    pub per_eps: Vec<(f64, f64)>,
}

/// Central differences `(J(u + eps v) - J(u - eps v)) / (2 eps)` under
/// common random numbers, Richardson-extrapolated over the step list.
///
/// Perturbed controls are projected onto the admissible bounds; a step is
/// rejected when the projection moves more than 1% of the nodes, since
/// that breaks the central-difference symmetry.
pub fn gateaux_fd(
    coeffs: &CoefficientSet,
    initial_state: f64,
    star_control: &ControlProcess,
    direction: &ControlProcess,
    delay: &Arc<DelayMap>,
    bundle: &BrownianBundle,
    eps_list: &[f64],
) -> Result<FdEstimate> {
    if eps_list.is_empty() {
        return Err(SmpError::Config("eps_list must not be empty".into()));
    }
    let n_paths = bundle.n_paths();
    let mut per_eps: Vec<(f64, f64)> = Vec::with_capacity(eps_list.len());
    let mut finest: Option<(f64, f64, f64)> = None; // (eps, value, se)

    let mut sorted: Vec<f64> = eps_list.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    for &eps in &sorted {
        if !(eps > 0.0) {
            return Err(SmpError::Config(format!("eps must be positive, got {eps}")));
        }
        let run = |scale: f64| -> Result<Vec<f64>> {
            let (ctrl, moved) = star_control.shifted(direction, scale).projected();
            if moved > 0.01 {
                return Err(SmpError::Config(format!(
                    "projection active on {:.1}% of nodes at eps {}: step too large for the bounds",
                    100.0 * moved,
                    scale.abs()
                )));
            }
            let state = euler_maruyama(
                coeffs,
                Arc::new(ctrl),
                delay.clone(),
                bundle,
                initial_state,
            )?;
            Ok(cost_paths(coeffs, &state, &state.control))
        };
        let plus = run(eps)?;
        let minus = run(-eps)?;
        let (d, se) = mean_and_std_error(n_paths, &|p| (plus[p] - minus[p]) / (2.0 * eps));
        per_eps.push((eps, d));
        finest = Some((eps, d, se));
    }

    let (value, spread) = if per_eps.len() >= 2 {
        let (e1, d1) = per_eps[per_eps.len() - 2];
        let (e2, d2) = per_eps[per_eps.len() - 1];
        // O(eps^2) error model
        let extrapolated = (e1 * e1 * d2 - e2 * e2 * d1) / (e1 * e1 - e2 * e2);
        (extrapolated, (d2 - d1).abs())
    } else {
        (per_eps[0].1, 0.0)
    };
    let (_, _, se) = finest.unwrap();
    Ok(FdEstimate {
        value,
        spread,
        std_error: se,
        per_eps,
    })
}

/// Discrete stationarity residual
/// `H_u(t) + E[ H_v(theta(t)) dtheta/dt | F_t ]` per path and node, with
/// the conditional term estimated by regression. The summary is the sup
/// over nodes of the L2 norm across paths.
#[derive(Debug, Clone)]
pub struct StationarityResidual {
    pub values: PathArray,
    pub grid: TimeGrid,
    pub sup_l2: f64,
}

pub fn stationarity_residual(
    coeffs: &CoefficientSet,
    star: &StateEnsemble,
    star_control: &ControlProcess,
    adjoint: &AdjointEnsemble,
    theta: &InverseDelayMap,
    cond: &ConditioningSet<'_>,
    basis: &RegressionBasis,
) -> Result<StationarityResidual> {
    let partials = HamiltonianPartials::resolve(coeffs)?;
    let grid = star.grid;
    let dt = grid.dt();
    let n_steps = grid.n_steps();
    let n_paths = star.n_paths();
    let n_vars = cond.n_vars();

    let mut values = PathArray::zeros(n_paths, n_steps + 1);
    let mut reg = StepRegressor::new(*basis);
    let mut raw = Vec::new();
    let mut target = Vec::with_capacity(n_paths);

    for i in 0..=n_steps {
        // anticipated term: E[ H_v(theta_i) w_i / dt | F_i ]; zero at the
        // terminal node where no forward interval remains
        let anticipated: Vec<f64> = if i < n_steps {
            target.clear();
            for p in 0..n_paths {
                let w = theta.weight(p, i);
                let h_v = match theta.idx(p, i) {
                    Some(th) if w != 0.0 => {
                        partials.h_v(&grid, star, star_control, adjoint, p, th) * w / dt
                    }
                    _ => 0.0,
                };
                target.push(h_v);
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
            partials.h_u(&grid, star, star_control, adjoint, p, i) + anticipated[p]
        });
    }

    let mut sup_l2 = 0.0f64;
    for i in 0..=n_steps {
        let l2 = (block_sum(n_paths, &|p| {
            let v = values.get(p, i);
            v * v
        }) / n_paths as f64)
            .sqrt();
        sup_l2 = sup_l2.max(l2);
    }
    Ok(StationarityResidual {
        values,
        grid,
        sup_l2,
    })
}

/// One candidate of the variational-inequality check.
#[derive(Debug, Clone)]
pub struct CandidateCheck {
    /// Minimum over nodes of the path-mean of `residual * (alpha - u*)`.
    pub min_node_mean: f64,
    /// Largest standard error among the node means.
    pub max_std_error: f64,
    /// Pointwise minimum over paths and nodes (reported, not gated).
    pub min_pointwise: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct InequalityReport {
    pub candidates: Vec<CandidateCheck>,
    pub passed: bool,
}

/// Draws random admissible controls `alpha` and checks the inequality
/// `residual * (alpha - u*) >= 0` at every node, up to three Monte Carlo
/// standard errors of each node mean.
pub fn variational_inequality_check(
    residual: &StationarityResidual,
    star_control: &ControlProcess,
    candidates: usize,
    seed: u64,
) -> Result<InequalityReport> {
    if candidates == 0 {
        return Err(SmpError::Config("candidates must be at least 1".into()));
    }
    let n_paths = residual.values.n_paths();
    let n_nodes = residual.values.n_nodes();
    let bounded = star_control.lower.is_finite() && star_control.upper.is_finite();

    let mut out = Vec::with_capacity(candidates);
    for c in 0..candidates {
        let candidate_seed = seed ^ (c as u64).wrapping_mul(0xA076_1D64_78BD_642F);
        // alternate one-sided draws so a signed residual cannot hide
        // behind a symmetric candidate average
        let draw_above = c % 2 == 0;
        let mut min_node_mean = f64::INFINITY;
        let mut max_se = 0.0f64;
        let mut min_pointwise = f64::INFINITY;
        // pairing samples per node, path-major RNG so draws are
        // reproducible per (candidate, path)
        let mut pairing = vec![0.0f64; n_paths * n_nodes];
        for (p, chunk) in pairing.chunks_mut(n_nodes).enumerate() {
            let mut rng = CounterRng::from_stream(candidate_seed, STREAM_CANDIDATE, p as u64);
            for (i, slot) in chunk.iter_mut().enumerate() {
                let u = star_control.get(p, i);
                let alpha = match (bounded, draw_above) {
                    (true, true) => rng.uniform_in(u, star_control.upper),
                    (true, false) => rng.uniform_in(star_control.lower, u),
                    (false, true) => u + rng.uniform(),
                    (false, false) => u - rng.uniform(),
                };
                *slot = residual.values.get(p, i) * (alpha - u);
            }
        }
        for i in 0..n_nodes {
            let (mean, se) = mean_and_std_error(n_paths, &|p| pairing[p * n_nodes + i]);
            min_node_mean = min_node_mean.min(mean);
            max_se = max_se.max(se);
            for p in 0..n_paths {
                min_pointwise = min_pointwise.min(pairing[p * n_nodes + i]);
            }
        }
        let passed = min_node_mean >= -3.0 * max_se;
        out.push(CandidateCheck {
            min_node_mean,
            max_std_error: max_se,
            min_pointwise,
            passed,
        });
    }
    let passed = out.iter().all(|c| c.passed);
    Ok(InequalityReport {
        candidates: out,
        passed,
    })
}

/// Both sides of the discrete duality pairing between the adjoint pair and
/// the variational process:
/// `E[g_x(X*_T) V_T]` against the assembled right-hand side
/// `E int [p b_u v + p b_v v_tau + q s_u v + q s_v v_tau] dt
///  - E int f_x V dt - E int f_y(theta) V d theta`.
#[derive(Debug, Clone)]
pub struct DualityReport {
    pub pairing_lhs: f64,
    pub pairing_rhs: f64,
    pub rel_err: f64,
}

pub fn duality_gap(
    coeffs: &CoefficientSet,
    star: &StateEnsemble,
    star_control: &ControlProcess,
    direction: &ControlProcess,
    adjoint: &AdjointEnsemble,
    variational: &VariationalEnsemble,
    theta: &InverseDelayMap,
) -> Result<DualityReport> {
    let grid = star.grid;
    let dt = grid.dt();
    let n_steps = grid.n_steps();
    let n_paths = star.n_paths();

    let bu = coeffs.partial(CoefKind::Drift, Slot::Control)?;
    let bv = coeffs.partial(CoefKind::Drift, Slot::DelayedControl)?;
    let su = coeffs.partial(CoefKind::Diffusion, Slot::Control)?;
    let sv = coeffs.partial(CoefKind::Diffusion, Slot::DelayedControl)?;
    let fx = coeffs.partial(CoefKind::RunningCost, Slot::State)?;
    let fy = coeffs.partial(CoefKind::RunningCost, Slot::DelayedState)?;
    let slope = coeffs.terminal_slope()?;

    let lhs = block_sum(n_paths, &|p| {
        slope(star.get(p, n_steps)) * variational.values.get(p, n_steps)
    }) / n_paths as f64;

    let starred = |p: usize, i: usize| -> (f64, f64, f64, f64, f64) {
        let j = star.delay.idx(p, i);
        (
            grid.node(i),
            star.get(p, i),
            star.get(p, j),
            star_control.get(p, i),
            star_control.get(p, j),
        )
    };

    let rhs = block_sum(n_paths, &|p| {
        let mut acc = 0.0;
        for i in 0..n_steps {
            let j = star.delay.idx(p, i);
            let (t, x, xd, u, ud) = starred(p, i);
            let v = direction.get(p, i);
            let vd = direction.get(p, j);
            let p_i = adjoint.y.get(p, i);
            let q_i = adjoint.z.get(p, i);
            acc += (p_i * (bu(t, x, xd, u, ud) * v + bv(t, x, xd, u, ud) * vd)
                + q_i * (su(t, x, xd, u, ud) * v + sv(t, x, xd, u, ud) * vd))
                * dt;
            acc -= fx(t, x, xd, u, ud) * variational.values.get(p, i) * dt;
            let w = theta.weight(p, i);
            if w != 0.0 {
                if let Some(th) = theta.idx(p, i) {
                    let (tt, xt, xdt, ut, udt) = starred(p, th);
                    acc -= fy(tt, xt, xdt, ut, udt) * variational.values.get(p, i) * w;
                }
            }
        }
        acc
    }) / n_paths as f64;

    let scale = lhs.abs().max(rhs.abs()).max(1e-12);
    Ok(DualityReport {
        pairing_lhs: lhs,
        pairing_rhs: rhs,
        rel_err: (lhs - rhs).abs() / scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::sample_brownian;
    use crate::delay::{pseudo_inverse, realize_delay, DelaySpec};

    #[test]
    fn hamiltonian_arithmetic() {
        let zero = CoefficientSet::builder().build();
        assert_eq!(hamiltonian(&zero, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0), 0.0);
        let c = CoefficientSet::builder()
            .drift(|_, _, _, _, _| 1.0)
            .diffusion(|_, _, _, _, _| 2.0)
            .running_cost(|_, _, _, _, _| 3.0)
            .build();
        assert_eq!(hamiltonian(&c, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0), 6.0);
    }

    #[test]
    fn cost_functional_deterministic_cases() {
        let grid = TimeGrid::new(2.0, 8).unwrap();
        let n_paths = 16;
        let bundle = sample_brownian(&grid, n_paths, 1).unwrap();
        let delay = Arc::new(crate::delay::DelayMap::identity(&grid, n_paths));
        let u = Arc::new(ControlProcess::constant(&grid, n_paths, 0.0));

        // f = 0, g(x) = x, zero dynamics, x0 = 1 => J = 1 exactly
        let c1 = CoefficientSet::builder().terminal_cost(|x| x).build();
        let s1 = euler_maruyama(&c1, u.clone(), delay.clone(), &bundle, 1.0).unwrap();
        let (j1, se1) = cost_functional(&c1, &s1, &u);
        assert_eq!(j1, 1.0);
        assert_eq!(se1, 0.0);

        // f = 1, g = 0, T = 2 => J = 2 exactly (constant integrand)
        let c2 = CoefficientSet::builder()
            .running_cost(|_, _, _, _, _| 1.0)
            .build();
        let s2 = euler_maruyama(&c2, u.clone(), delay, &bundle, 1.0).unwrap();
        let (j2, _) = cost_functional(&c2, &s2, &u);
        assert!((j2 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn variational_zero_direction_is_zero() {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let n_paths = 32;
        let bundle = sample_brownian(&grid, n_paths, 2).unwrap();
        let delay = Arc::new(
            realize_delay(&DelaySpec::Proportional { a: 0.5 }, &grid, n_paths, 2).unwrap(),
        );
        let coeffs = CoefficientSet::builder()
            .drift(|_, x, y, u, v| x + y + u + v)
            .diffusion(|_, x, _, _, _| 0.1 * x)
            .build();
        let u = Arc::new(ControlProcess::constant(&grid, n_paths, 1.0));
        let star = euler_maruyama(&coeffs, u.clone(), delay, &bundle, 1.0).unwrap();
        let v = ControlProcess::constant(&grid, n_paths, 0.0);
        let var = variational_solve(&coeffs, &star, &u, &v, &bundle).unwrap();
        for p in 0..n_paths {
            for i in 0..=16 {
                assert_eq!(var.values.get(p, i), 0.0);
            }
        }
    }

    #[test]
    fn variational_pure_integrator() {
        // drift sensitivity only to the current control: V(t) = int_0^t v
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let n_paths = 4;
        let bundle = sample_brownian(&grid, n_paths, 3).unwrap();
        let delay = Arc::new(crate::delay::DelayMap::identity(&grid, n_paths));
        let coeffs = CoefficientSet::builder()
            .drift(|_, _, _, u, _| u)
            .drift_partial(Slot::State, |_, _, _, _, _| 0.0)
            .drift_partial(Slot::DelayedState, |_, _, _, _, _| 0.0)
            .drift_partial(Slot::Control, |_, _, _, _, _| 1.0)
            .drift_partial(Slot::DelayedControl, |_, _, _, _, _| 0.0)
            .build();
        let u = Arc::new(ControlProcess::constant(&grid, n_paths, 0.0));
        let star = euler_maruyama(&coeffs, u.clone(), delay, &bundle, 0.0).unwrap();
        let v = ControlProcess::from_profile(&grid, n_paths, |t| t);
        let var = variational_solve(&coeffs, &star, &u, &v, &bundle).unwrap();
        // V(1) = int_0^1 t dt = 0.5 up to left-Riemann bias O(dt)
        for p in 0..n_paths {
            assert!((var.values.get(p, 100) - 0.5).abs() < 1.5 * grid.dt());
        }
    }

    #[test]
    fn gateaux_adjoint_zero_direction_and_linearity() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let n_paths = 64;
        let bundle = sample_brownian(&grid, n_paths, 4).unwrap();
        let delay = Arc::new(
            realize_delay(&DelaySpec::Proportional { a: 0.7 }, &grid, n_paths, 4).unwrap(),
        );
        let coeffs = CoefficientSet::builder()
            .drift(|_, x, _, u, _| 0.5 * x + u)
            .running_cost(|_, _, _, u, _| 0.5 * u * u)
            .terminal_cost(|x| 0.5 * x * x)
            .build();
        let u = Arc::new(ControlProcess::constant(&grid, n_paths, 0.5));
        let star = euler_maruyama(&coeffs, u.clone(), delay, &bundle, 1.0).unwrap();
        let adjoint = AdjointEnsemble {
            y: PathArray::constant(n_paths, 11, 0.3),
            z: PathArray::constant(n_paths, 11, -0.1),
            grid,
        };
        let zero_dir = ControlProcess::constant(&grid, n_paths, 0.0);
        let (d0, _) = gateaux_adjoint(&coeffs, &star, &u, &zero_dir, &adjoint).unwrap();
        assert_eq!(d0, 0.0);

        let v = ControlProcess::from_profile(&grid, n_paths, |t| 1.0 + t);
        let (d1, _) = gateaux_adjoint(&coeffs, &star, &u, &v, &adjoint).unwrap();
        let v3 = v.shifted(&v, 2.0); // 3 v
        let (d3, _) = gateaux_adjoint(&coeffs, &star, &u, &v3, &adjoint).unwrap();
        assert!((d3 - 3.0 * d1).abs() <= 1e-12 * d1.abs().max(1.0));
    }

    #[test]
    fn gateaux_fd_quadratic_cost_matches_closed_form() {
        // deterministic dynamics dX = u dt, J = int u^2/2 dt + 0: the
        // Gateaux derivative at u in direction v is int u v dt plus the
        // terminal pairing; with g = 0 it is exactly int u v dt
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let n_paths = 8;
        let bundle = sample_brownian(&grid, n_paths, 5).unwrap();
        let delay = Arc::new(crate::delay::DelayMap::identity(&grid, n_paths));
        let coeffs = CoefficientSet::builder()
            .drift(|_, _, _, u, _| u)
            .running_cost(|_, _, _, u, _| 0.5 * u * u)
            .build();
        let u = ControlProcess::constant(&grid, n_paths, 0.7);
        let v = ControlProcess::from_profile(&grid, n_paths, |t| (std::f64::consts::PI * t).sin());
        let fd = gateaux_fd(&coeffs, 0.0, &u, &v, &delay, &bundle, &[0.1, 0.05]).unwrap();
        // left Riemann sum of 0.7 sin(pi t)
        let expect: f64 = (0..200)
            .map(|i| 0.7 * (std::f64::consts::PI * grid.node(i)).sin() * grid.dt())
            .sum();
        assert!(
            (fd.value - expect).abs() < 1e-6,
            "fd {} vs {}",
            fd.value,
            expect
        );
        assert!(fd.spread < 1e-10); // J quadratic in u: differences are exact
    }

    #[test]
    fn gateaux_fd_rejects_heavy_projection() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let n_paths = 4;
        let bundle = sample_brownian(&grid, n_paths, 6).unwrap();
        let delay = Arc::new(crate::delay::DelayMap::identity(&grid, n_paths));
        let coeffs = CoefficientSet::builder().build();
        let u = ControlProcess::new(PathArray::constant(n_paths, 11, 1.0), 0.0, 1.0).unwrap();
        let v = ControlProcess::constant(&grid, n_paths, 1.0);
        match gateaux_fd(&coeffs, 0.0, &u, &v, &delay, &bundle, &[0.1]) {
            Err(SmpError::Config(msg)) => assert!(msg.contains("projection")),
            other => panic!("expected projection rejection, got {other:?}"),
        }
    }

    #[test]
    fn constant_residual_detected() {
        // H_u = c, H_v = 0 => residual = c at every node
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let n_paths = 256;
        let bundle = sample_brownian(&grid, n_paths, 7).unwrap();
        let delay = Arc::new(
            realize_delay(&DelaySpec::Proportional { a: 0.5 }, &grid, n_paths, 7).unwrap(),
        );
        let theta = pseudo_inverse(&delay, &grid);
        let coeffs = CoefficientSet::builder()
            .running_cost(|_, _, _, u, _| 2.5 * u)
            .build();
        let u = Arc::new(ControlProcess::constant(&grid, n_paths, 0.0));
        let star = euler_maruyama(&coeffs, u.clone(), delay, &bundle, 1.0).unwrap();
        let adjoint = AdjointEnsemble::zeros(grid, n_paths);
        let w = bundle.cumulative();
        let cond = ConditioningSet::brownian_only(&w);
        let res = stationarity_residual(
            &coeffs,
            &star,
            &u,
            &adjoint,
            &theta,
            &cond,
            &RegressionBasis::default(),
        )
        .unwrap();
        for p in (0..n_paths).step_by(37) {
            for i in 0..=8 {
                assert!((res.values.get(p, i) - 2.5).abs() < 1e-9);
            }
        }
        assert!((res.sup_l2 - 2.5).abs() < 1e-9);
    }

    #[test]
    fn inequality_check_boundary_logic() {
        // u* clamped at the lower bound with positive residual passes
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let n_paths = 512;
        let residual = StationarityResidual {
            values: PathArray::constant(n_paths, 5, 2.0),
            grid,
            sup_l2: 2.0,
        };
        let u = ControlProcess::new(PathArray::constant(n_paths, 5, 0.0), 0.0, 1.0).unwrap();
        let report = variational_inequality_check(&residual, &u, 8, 99).unwrap();
        assert!(report.passed);
        for c in &report.candidates {
            assert!(c.min_pointwise >= 0.0);
        }

        // u* stuck at the UPPER bound with positive residual is suboptimal:
        // every admissible alpha moves the pairing negative
        let u_top = ControlProcess::new(PathArray::constant(n_paths, 5, 1.0), 0.0, 1.0).unwrap();
        let report = variational_inequality_check(&residual, &u_top, 8, 99).unwrap();
        assert!(!report.passed);

        // an interior control with a nonzero residual is flagged by the
        // one-sided candidates below it
        let u_mid = ControlProcess::new(PathArray::constant(n_paths, 5, 0.5), 0.0, 1.0).unwrap();
        let report = variational_inequality_check(&residual, &u_mid, 8, 99).unwrap();
        assert!(!report.passed);

        // an interior control with a vanishing residual passes trivially
        let zero_res = StationarityResidual {
            values: PathArray::constant(n_paths, 5, 0.0),
            grid,
            sup_l2: 0.0,
        };
        let report = variational_inequality_check(&zero_res, &u_mid, 8, 99).unwrap();
        assert!(report.passed);
    }
}
