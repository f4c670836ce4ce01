//! Shared fixtures for the benchmark suite: a small moving-average LQ
//! problem and a delayed geometric model at bench-friendly sizes.

use smp_lab_core::lq::{LqCoefficients, TimeFn};
use smp_lab_core::{
    realize_delay, sample_brownian, BrownianBundle, CoefficientSet, ControlProcess, DelayMap,
    DelaySpec, TimeGrid,
};
use std::sync::Arc;

pub struct ForwardFixture {
    pub grid: TimeGrid,
    pub bundle: BrownianBundle,
    pub delay: Arc<DelayMap>,
    pub control: Arc<ControlProcess>,
    pub coeffs: CoefficientSet,
}

pub fn forward_fixture(n_paths: usize, n_steps: usize) -> ForwardFixture {
    let grid = TimeGrid::new(1.0, n_steps).unwrap();
    let bundle = sample_brownian(&grid, n_paths, 42).unwrap();
    let delay = Arc::new(
        realize_delay(&DelaySpec::Proportional { a: 0.5 }, &grid, n_paths, 42).unwrap(),
    );
    let control = Arc::new(ControlProcess::constant(&grid, n_paths, 0.1));
    let coeffs = CoefficientSet::builder()
        .drift(|_, x, y, u, v| -0.5 * x + 0.2 * y + u + 0.1 * v)
        .diffusion(|_, x, y, _, _| 0.2 * x + 0.1 * y)
        .build();
    ForwardFixture {
        grid,
        bundle,
        delay,
        control,
        coeffs,
    }
}

pub fn bench_lq() -> LqCoefficients {
    LqCoefficients {
        drift_state: TimeFn::Constant(-0.5),
        drift_delayed: TimeFn::Constant(0.2),
        drift_control: TimeFn::Constant(1.0),
        drift_delayed_control: TimeFn::Constant(0.1),
        diffusion_state: TimeFn::Constant(0.2),
        diffusion_delayed: TimeFn::Constant(0.1),
        diffusion_control: TimeFn::Constant(0.1),
        diffusion_delayed_control: TimeFn::Constant(0.05),
        state_weight: TimeFn::Constant(0.5),
        delayed_weight: TimeFn::Constant(0.25),
        control_weight: TimeFn::Constant(1.0),
        terminal_weight: 0.5,
        delay_fraction: 0.5,
        initial_state: 1.0,
    }
}
