//! Model coefficient sets: drift, diffusion, running and terminal cost,
//! together with their partial derivatives.
//!
//! All coefficients are scalar functions of `(t, x, y, u, v)` where `x` is
//! the current state, `y` the delayed state, `u` the current control and
//! `v` the delayed control. Partials may be supplied analytically; when the
//! finite-difference fallback is enabled, missing partials are replaced by
//! central differences with step `fd_step`.

use crate::error::{Result, SmpError};
use crate::rng::{CounterRng, STREAM_PROBE};
use std::sync::Arc;

pub type DynCoef = Arc<dyn Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync>;
pub type DynTerminal = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Argument slot a partial derivative is taken in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Current state.
    State,
    /// Delayed state.
    DelayedState,
    /// Current control.
    Control,
    /// Delayed control.
    DelayedControl,
}

impl Slot {
    pub const ALL: [Slot; 4] = [
        Slot::State,
        Slot::DelayedState,
        Slot::Control,
        Slot::DelayedControl,
    ];

    #[inline]
    fn index(self) -> usize {
        match self {
            Slot::State => 0,
            Slot::DelayedState => 1,
            Slot::Control => 2,
            Slot::DelayedControl => 3,
        }
    }
}

/// Which coefficient function a partial refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefKind {
    Drift,
    Diffusion,
    RunningCost,
}

#[derive(Clone)]
pub struct CoefficientSet {
    pub drift: DynCoef,
    pub diffusion: DynCoef,
    pub running_cost: DynCoef,
    pub terminal_cost: DynTerminal,
    drift_partials: [Option<DynCoef>; 4],
    diffusion_partials: [Option<DynCoef>; 4],
    cost_partials: [Option<DynCoef>; 4],
    terminal_slope: Option<DynTerminal>,
    /// Allow central-difference fallback for missing partials.
    pub fd_fallback: bool,
    /// Step for finite-difference partials.
    pub fd_step: f64,
}

impl std::fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("fd_fallback", &self.fd_fallback)
            .field("fd_step", &self.fd_step)
            .finish_non_exhaustive()
    }
}

pub struct CoefficientSetBuilder {
    set: CoefficientSet,
}

impl CoefficientSet {
    pub fn builder() -> CoefficientSetBuilder {
        CoefficientSetBuilder {
            set: CoefficientSet {
                drift: Arc::new(|_, _, _, _, _| 0.0),
                diffusion: Arc::new(|_, _, _, _, _| 0.0),
                running_cost: Arc::new(|_, _, _, _, _| 0.0),
                terminal_cost: Arc::new(|_| 0.0),
                drift_partials: [None, None, None, None],
                diffusion_partials: [None, None, None, None],
                cost_partials: [None, None, None, None],
                terminal_slope: None,
                fd_fallback: true,
                fd_step: 1e-5,
            },
        }
    }

    #[inline]
    pub fn eval(&self, kind: CoefKind, t: f64, x: f64, y: f64, u: f64, v: f64) -> f64 {
        match kind {
            CoefKind::Drift => (self.drift)(t, x, y, u, v),
            CoefKind::Diffusion => (self.diffusion)(t, x, y, u, v),
            CoefKind::RunningCost => (self.running_cost)(t, x, y, u, v),
        }
    }

    fn stored_partial(&self, kind: CoefKind, slot: Slot) -> &Option<DynCoef> {
        let arr = match kind {
            CoefKind::Drift => &self.drift_partials,
            CoefKind::Diffusion => &self.diffusion_partials,
            CoefKind::RunningCost => &self.cost_partials,
        };
        &arr[slot.index()]
    }

    /// Resolves a partial derivative to a callable, using the analytic form
    /// when supplied and a central difference otherwise.
    pub fn partial(&self, kind: CoefKind, slot: Slot) -> Result<DynCoef> {
        if let Some(p) = self.stored_partial(kind, slot) {
            return Ok(p.clone());
        }
        if !self.fd_fallback {
            return Err(SmpError::Config(format!(
                "analytic partial {kind:?}/{slot:?} missing and finite-difference fallback disabled"
            )));
        }
        let base = match kind {
            CoefKind::Drift => self.drift.clone(),
            CoefKind::Diffusion => self.diffusion.clone(),
            CoefKind::RunningCost => self.running_cost.clone(),
        };
        let h = self.fd_step;
        Ok(match slot {
            Slot::State => Arc::new(move |t, x, y, u, v| {
                (base(t, x + h, y, u, v) - base(t, x - h, y, u, v)) / (2.0 * h)
            }),
            Slot::DelayedState => Arc::new(move |t, x, y, u, v| {
                (base(t, x, y + h, u, v) - base(t, x, y - h, u, v)) / (2.0 * h)
            }),
            Slot::Control => Arc::new(move |t, x, y, u, v| {
                (base(t, x, y, u + h, v) - base(t, x, y, u - h, v)) / (2.0 * h)
            }),
            Slot::DelayedControl => Arc::new(move |t, x, y, u, v| {
                (base(t, x, y, u, v + h) - base(t, x, y, u, v - h)) / (2.0 * h)
            }),
        })
    }

    /// Derivative of the terminal cost.
    pub fn terminal_slope(&self) -> Result<DynTerminal> {
        if let Some(p) = &self.terminal_slope {
            return Ok(p.clone());
        }
        if !self.fd_fallback {
            return Err(SmpError::Config(
                "terminal-cost slope missing and finite-difference fallback disabled".into(),
            ));
        }
        let base = self.terminal_cost.clone();
        let h = self.fd_step;
        Ok(Arc::new(move |x| (base(x + h) - base(x - h)) / (2.0 * h)))
    }

    fn supplied_partials(&self) -> Vec<(CoefKind, Slot)> {
        let mut out = Vec::new();
        for kind in [CoefKind::Drift, CoefKind::Diffusion, CoefKind::RunningCost] {
            for slot in Slot::ALL {
                if self.stored_partial(kind, slot).is_some() {
                    out.push((kind, slot));
                }
            }
        }
        out
    }
}

impl CoefficientSetBuilder {
    pub fn drift<F: Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static>(
        mut self,
        f: F,
    ) -> Self {
        self.set.drift = Arc::new(f);
        self
    }

    pub fn diffusion<F: Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static>(
        mut self,
        f: F,
    ) -> Self {
        self.set.diffusion = Arc::new(f);
        self
    }

    pub fn running_cost<F: Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static>(
        mut self,
        f: F,
    ) -> Self {
        self.set.running_cost = Arc::new(f);
        self
    }

    pub fn terminal_cost<F: Fn(f64) -> f64 + Send + Sync + 'static>(mut self, f: F) -> Self {
        self.set.terminal_cost = Arc::new(f);
        self
    }

    pub fn drift_partial<F: Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static>(
        mut self,
        slot: Slot,
        f: F,
    ) -> Self {
        self.set.drift_partials[slot.index()] = Some(Arc::new(f));
        self
    }

    pub fn diffusion_partial<F: Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static>(
        mut self,
        slot: Slot,
        f: F,
    ) -> Self {
        self.set.diffusion_partials[slot.index()] = Some(Arc::new(f));
        self
    }

    pub fn cost_partial<F: Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static>(
        mut self,
        slot: Slot,
        f: F,
    ) -> Self {
        self.set.cost_partials[slot.index()] = Some(Arc::new(f));
        self
    }

    pub fn terminal_slope<F: Fn(f64) -> f64 + Send + Sync + 'static>(mut self, f: F) -> Self {
        self.set.terminal_slope = Some(Arc::new(f));
        self
    }

    pub fn fd_fallback(mut self, enabled: bool) -> Self {
        self.set.fd_fallback = enabled;
        self
    }

    pub fn fd_step(mut self, h: f64) -> Self {
        self.set.fd_step = h;
        self
    }

    pub fn build(self) -> CoefficientSet {
        self.set
    }
}

/// Numerical health report from [`check_coefficients`].
#[derive(Debug, Clone)]
pub struct CoefficientReport {
    /// Largest observed ratio `|phi(p1) - phi(p2)| / |p1 - p2|` over probe
    /// pairs, across drift, diffusion and running cost.
    pub max_lipschitz_ratio: f64,
    /// Largest observed `phi^2 / (1 + x^2 + y^2 + u^2 + v^2)`.
    pub max_growth_ratio: f64,
    /// Largest relative mismatch between a supplied analytic partial and
    /// its central-difference probe.
    pub max_partial_mismatch: f64,
    /// Set when the growth ratio keeps climbing with probe radius, which
    /// indicates super-linear growth in the state/control arguments.
    pub superlinear_growth: bool,
    /// Number of probe points used.
    pub probes: usize,
}

const PARTIAL_MISMATCH_TOLERANCE: f64 = 1e-4;

/// Probes growth and Lipschitz behavior of the coefficients on random
/// points, and validates supplied analytic partials against central
/// differences. Probe states and controls range over `[-10, 10]`, times
/// over `[0, 1]`.
pub fn check_coefficients(
    coeffs: &CoefficientSet,
    probes: usize,
    seed: u64,
) -> Result<CoefficientReport> {
    if probes == 0 {
        return Err(SmpError::Config("probes must be at least 1".into()));
    }
    let mut rng = CounterRng::from_stream(seed, STREAM_PROBE, 0);
    let mut draw_point = |radius: f64| -> [f64; 5] {
        [
            rng.uniform(),
            rng.uniform_in(-radius, radius),
            rng.uniform_in(-radius, radius),
            rng.uniform_in(-radius, radius),
            rng.uniform_in(-radius, radius),
        ]
    };

    let kinds = [CoefKind::Drift, CoefKind::Diffusion, CoefKind::RunningCost];
    let mut max_lipschitz: f64 = 0.0;
    let mut max_growth: f64 = 0.0;
    let mut max_growth_inner: f64 = 0.0;
    let mut max_mismatch: f64 = 0.0;
    let supplied = coeffs.supplied_partials();

    for _ in 0..probes {
        let a = draw_point(10.0);
        let b = draw_point(10.0);
        let inner = draw_point(1.0);
        for kind in kinds {
            let fa = coeffs.eval(kind, a[0], a[1], a[2], a[3], a[4]);
            // growth ratio per condition |phi|^2 <= L (1 + |args|^2)
            let denom = 1.0 + a[1..].iter().map(|z| z * z).sum::<f64>();
            max_growth = max_growth.max(fa * fa / denom);
            let fi = coeffs.eval(kind, inner[0], inner[1], inner[2], inner[3], inner[4]);
            let denom_i = 1.0 + inner[1..].iter().map(|z| z * z).sum::<f64>();
            max_growth_inner = max_growth_inner.max(fi * fi / denom_i);
            // Lipschitz ratio in the spatial arguments (same t)
            let dist: f64 = a[1..]
                .iter()
                .zip(&b[1..])
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            if dist > 1e-9 {
                let fb_spatial = coeffs.eval(kind, a[0], b[1], b[2], b[3], b[4]);
                max_lipschitz = max_lipschitz.max((fa - fb_spatial).abs() / dist);
            }
        }
        // analytic partials vs central differences at the probe point
        for &(kind, slot) in &supplied {
            let analytic = coeffs.stored_partial(kind, slot).as_ref().unwrap();
            let got = analytic(a[0], a[1], a[2], a[3], a[4]);
            let h = coeffs.fd_step;
            let base = |x: f64, y: f64, u: f64, v: f64| coeffs.eval(kind, a[0], x, y, u, v);
            let fd = match slot {
                Slot::State => (base(a[1] + h, a[2], a[3], a[4]) - base(a[1] - h, a[2], a[3], a[4])) / (2.0 * h),
                Slot::DelayedState => (base(a[1], a[2] + h, a[3], a[4]) - base(a[1], a[2] - h, a[3], a[4])) / (2.0 * h),
                Slot::Control => (base(a[1], a[2], a[3] + h, a[4]) - base(a[1], a[2], a[3] - h, a[4])) / (2.0 * h),
                Slot::DelayedControl => (base(a[1], a[2], a[3], a[4] + h) - base(a[1], a[2], a[3], a[4] - h)) / (2.0 * h),
            };
            let rel = (got - fd).abs() / got.abs().max(1.0);
            max_mismatch = max_mismatch.max(rel);
        }
    }
    if let Some(slope) = &coeffs.terminal_slope {
        for _ in 0..probes.min(64) {
            let x = rng.uniform_in(-10.0, 10.0);
            let h = coeffs.fd_step;
            let fd = ((coeffs.terminal_cost)(x + h) - (coeffs.terminal_cost)(x - h)) / (2.0 * h);
            let rel = (slope(x) - fd).abs() / slope(x).abs().max(1.0);
            max_mismatch = max_mismatch.max(rel);
        }
    }

    let report = CoefficientReport {
        max_lipschitz_ratio: max_lipschitz,
        max_growth_ratio: max_growth,
        // growth ratio climbing by 4x between unit-radius and radius-10
        // probes indicates super-linear behavior
        superlinear_growth: max_growth > 4.0 * max_growth_inner.max(1e-12),
        max_partial_mismatch: max_mismatch,
        probes,
    };
    if max_mismatch > PARTIAL_MISMATCH_TOLERANCE {
        return Err(SmpError::CoefficientValidation(format!(
            "analytic partial deviates from central difference by {max_mismatch:.3e} \
             (tolerance {PARTIAL_MISMATCH_TOLERANCE:.0e})"
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_partial_matches_exactly() {
        let c = CoefficientSet::builder()
            .drift(|_, x, _, _, _| x)
            .drift_partial(Slot::State, |_, _, _, _, _| 1.0)
            .build();
        let report = check_coefficients(&c, 64, 1).unwrap();
        assert!(report.max_partial_mismatch < 1e-9);
        assert!(!report.superlinear_growth);
    }

    #[test]
    fn quadratic_growth_is_flagged_not_fatal() {
        let c = CoefficientSet::builder().drift(|_, x, _, _, _| x * x).build();
        let report = check_coefficients(&c, 256, 2).unwrap();
        assert!(report.superlinear_growth);
    }

    #[test]
    fn wrong_partial_is_an_error() {
        let c = CoefficientSet::builder()
            .drift(|_, x, _, _, _| x)
            .drift_partial(Slot::State, |_, _, _, _, _| 2.0)
            .build();
        match check_coefficients(&c, 16, 3) {
            Err(SmpError::CoefficientValidation(_)) => {}
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn fd_fallback_can_be_disabled() {
        let c = CoefficientSet::builder()
            .drift(|_, x, _, _, _| x)
            .fd_fallback(false)
            .build();
        assert!(c.partial(CoefKind::Drift, Slot::State).is_err());
        let with_partial = CoefficientSet::builder()
            .drift(|_, x, _, _, _| x)
            .drift_partial(Slot::State, |_, _, _, _, _| 1.0)
            .fd_fallback(false)
            .build();
        assert!(with_partial.partial(CoefKind::Drift, Slot::State).is_ok());
    }

    #[test]
    fn fd_partial_approximates_derivative() {
        let c = CoefficientSet::builder()
            .drift(|_, x, _, _, _| x * x * x)
            .build();
        let px = c.partial(CoefKind::Drift, Slot::State).unwrap();
        let got = px(0.0, 2.0, 0.0, 0.0, 0.0);
        assert!((got - 12.0).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn zero_probes_rejected() {
        let c = CoefficientSet::builder().build();
        assert!(check_coefficients(&c, 0, 1).is_err());
    }
}
