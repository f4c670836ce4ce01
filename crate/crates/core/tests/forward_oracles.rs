//! Forward-solver oracles: the pantograph equation, Brownian laws,
//! geometric growth and Picard uniqueness.

use smp_lab_core::{
    euler_maruyama, realize_delay, sample_brownian, CoefficientSet, ControlProcess, DelaySpec,
    PathArray, TimeGrid,
};
use std::sync::Arc;

/// Series solution of x'(t) = x(a t), x(0) = 1:
/// x(t) = sum_k a^(k(k-1)/2) t^k / k!.
fn pantograph_series(a: f64, t: f64) -> f64 {
    let mut total = 0.0;
    let mut term = 1.0; // a^(k(k-1)/2) t^k / k!
    for k in 0..80 {
        total += term;
        term *= a.powi(k) * t / (k + 1) as f64;
        if term.abs() < 1e-18 {
            break;
        }
    }
    total
}

/// Fine-grid integration of x'(t) = x(a t) with linear interpolation of
/// the delayed read (independent of the library's grid projection).
fn pantograph_fine_grid(a: f64, t_end: f64, n: usize) -> f64 {
    let h = t_end / n as f64;
    let mut xs = Vec::with_capacity(n + 1);
    xs.push(1.0f64);
    for i in 0..n {
        let t = i as f64 * h;
        let s = a * t / h;
        let j = (s.floor() as usize).min(i);
        let w = s - j as f64;
        let delayed = if j < i {
            xs[j] * (1.0 - w) + xs[j + 1] * w
        } else {
            xs[j]
        };
        let next = xs[i] + h * delayed;
        xs.push(next);
    }
    *xs.last().unwrap()
}

#[test]
fn pantograph_series_and_fine_grid_agree() {
    let series = pantograph_series(0.5, 1.0);
    let fine = pantograph_fine_grid(0.5, 1.0, 1_000_000);
    assert!((series - 2.2715).abs() < 1e-3, "series {series}");
    assert!(
        (series - fine).abs() / series < 1e-5,
        "series {series} vs fine-grid {fine}"
    );
}

#[test]
fn euler_tracks_the_pantograph_oracle() {
    // deterministic dynamics dX = X_tau dt with tau(t) = t / 2
    let grid = TimeGrid::new(1.0, 10_000).unwrap();
    let bundle = sample_brownian(&grid, 1, 3).unwrap();
    let delay = Arc::new(realize_delay(&DelaySpec::Proportional { a: 0.5 }, &grid, 1, 3).unwrap());
    let coeffs = CoefficientSet::builder().drift(|_, _, y, _, _| y).build();
    let u = Arc::new(ControlProcess::constant(&grid, 1, 0.0));
    let state = euler_maruyama(&coeffs, u, delay, &bundle, 1.0).unwrap();
    let got = state.get(0, grid.n_steps());
    let oracle = pantograph_series(0.5, 1.0);
    let rel = (got - oracle).abs() / oracle;
    assert!(rel <= 1e-3, "terminal {got} vs oracle {oracle}, rel {rel}");
}

#[test]
fn geometric_growth_mean_with_noise() {
    // dX = X dt + 0.2 X dW, no delay: E[X_T] = x0 e^T up to Euler bias
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let n_paths = 100_000;
    let bundle = sample_brownian(&grid, n_paths, 2024).unwrap();
    let delay = Arc::new(realize_delay(&DelaySpec::FixedLag { lag: 0.0 }, &grid, n_paths, 7).unwrap());
    let coeffs = CoefficientSet::builder()
        .drift(|_, x, _, _, _| x)
        .diffusion(|_, x, _, _, _| 0.2 * x)
        .build();
    let u = Arc::new(ControlProcess::constant(&grid, n_paths, 0.0));
    let state = euler_maruyama(&coeffs, u, delay, &bundle, 1.0).unwrap();
    let mean = state.values.node_mean(grid.n_steps());
    let expect = 1.0f64.exp();
    // 5 sigma MC band plus first-order discretization allowance
    let sd = state.values.node_variance(grid.n_steps()).sqrt();
    let band = 5.0 * sd / (n_paths as f64).sqrt() + 2.0 * expect * grid.dt();
    assert!(
        (mean - expect).abs() <= band,
        "mean {mean} vs {expect}, band {band}"
    );
}

#[test]
fn picard_uniqueness_from_different_guesses() {
    // runs started at x0 and x0 + 1 land on iterates whose gap metric is
    // below tolerance (the discrete uniqueness surrogate)
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let n_paths = 2_000;
    let bundle = sample_brownian(&grid, n_paths, 5).unwrap();
    let delay = realize_delay(&DelaySpec::Proportional { a: 0.5 }, &grid, n_paths, 5).unwrap();
    let coeffs = CoefficientSet::builder()
        .drift(|_, x, y, _, _| 0.7 * x + 0.3 * y)
        .diffusion(|_, x, _, _, _| 0.2 * x)
        .build();
    let control = ControlProcess::constant(&grid, n_paths, 0.0);
    let x0 = 1.0;
    let tol = 1e-16;
    let (a, diag_a) = smp_lab_core::forward::picard_iterate(
        &coeffs,
        &control,
        &delay,
        &bundle,
        PathArray::constant(n_paths, grid.n_nodes(), x0),
        60,
        tol,
    )
    .unwrap();
    let guess = {
        let mut g = PathArray::constant(n_paths, grid.n_nodes(), x0 + 1.0);
        // first node must still be the true initial state: the iteration
        // pins it, so only the interior guess differs
        g = g.densified();
        for p in 0..n_paths {
            g.set(p, 0, x0);
        }
        g
    };
    let (b, diag_b) = smp_lab_core::forward::picard_iterate(
        &coeffs, &control, &delay, &bundle, guess, 60, tol,
    )
    .unwrap();
    assert!(diag_a.converged && diag_b.converged);
    let gap = smp_lab_core::forward::mean_square_gap(&a, &b);
    assert!(gap <= tol * 10.0, "mean-square gap between limits {gap}");
}

#[test]
fn random_slope_delay_statistics() {
    // random-slope delays produce per-path maps but keep the state within
    // sane bounds and reproduce exactly under the same seed
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let n_paths = 512;
    let bundle = sample_brownian(&grid, n_paths, 11).unwrap();
    let spec = DelaySpec::RandomSlope {
        a_min: 0.3,
        a_max: 0.9,
    };
    let d1 = realize_delay(&spec, &grid, n_paths, 11).unwrap();
    let d2 = realize_delay(&spec, &grid, n_paths, 11).unwrap();
    assert_eq!(d1, d2);
    assert!(!d1.is_shared());
    let coeffs = CoefficientSet::builder()
        .drift(|_, _, y, _, _| y)
        .diffusion(|_, _, y, _, _| 0.1 * y)
        .build();
    let u = Arc::new(ControlProcess::constant(&grid, n_paths, 0.0));
    let s1 = euler_maruyama(&coeffs, u.clone(), Arc::new(d1), &bundle, 1.0).unwrap();
    let s2 = euler_maruyama(&coeffs, u, Arc::new(d2), &bundle, 1.0).unwrap();
    for p in (0..n_paths).step_by(41) {
        assert_eq!(s1.get(p, 64).to_bits(), s2.get(p, 64).to_bits());
    }
}
