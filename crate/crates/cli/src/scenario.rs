//! Scenario files: the JSON schema, validation, and compilation into the
//! numerical types.

use crate::expr::{Expr, Var};
use serde::{Deserialize, Serialize};
use smp_lab_core::lq::{LqCoefficients, TimeFn};
use smp_lab_core::{
    CoefficientSet, CoefficientSetBuilder, DelaySpec, RegressionBasis, Slot, TimeGrid,
};
use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub enum ScenarioError {
    Io(std::io::Error),
    /// JSON syntax or schema violation, with serde's line/column message.
    Parse(String),
    /// A field failed validation; names the offending key.
    Validation(String),
    /// An expression failed to compile; names the field and the bad token.
    Expression { field: String, error: String },
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioError::Io(e) => write!(f, "cannot read scenario: {e}"),
            ScenarioError::Parse(msg) => write!(f, "scenario parse error: {msg}"),
            ScenarioError::Validation(msg) => write!(f, "scenario validation error: {msg}"),
            ScenarioError::Expression { field, error } => {
                write!(f, "in field '{field}': {error}")
            }
        }
    }
}

impl std::error::Error for ScenarioError {}

/// Time function in scenario files: a constant or polynomial coefficients
/// in increasing degree.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum TimeFnSpec {
    Constant(f64),
    Polynomial(Vec<f64>),
}

impl TimeFnSpec {
    fn to_time_fn(&self) -> TimeFn {
        match self {
            TimeFnSpec::Constant(c) => TimeFn::Constant(*c),
            TimeFnSpec::Polynomial(cs) => TimeFn::Polynomial(cs.clone()),
        }
    }
}

fn zero_timefn() -> TimeFnSpec {
    TimeFnSpec::Constant(0.0)
}

fn one_timefn() -> TimeFnSpec {
    TimeFnSpec::Constant(1.0)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub horizon: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelaySpecConfig {
    Proportional { a: f64 },
    FixedLag { lag: f64 },
    RandomSlope { a_min: f64, a_max: f64 },
    PiecewiseJump { rate: f64, step: f64 },
}

impl DelaySpecConfig {
    pub fn to_delay_spec(&self) -> DelaySpec {
        match *self {
            DelaySpecConfig::Proportional { a } => DelaySpec::Proportional { a },
            DelaySpecConfig::FixedLag { lag } => DelaySpec::FixedLag { lag },
            DelaySpecConfig::RandomSlope { a_min, a_max } => {
                DelaySpec::RandomSlope { a_min, a_max }
            }
            DelaySpecConfig::PiecewiseJump { rate, step } => {
                DelaySpec::PiecewiseJump { rate, step }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    /// Deterministic initial control profile, an expression in `t`.
    #[serde(default = "zero_expr")]
    pub initial: String,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

fn zero_expr() -> String {
    "0".to_string()
}

impl Default for ControlSpec {
    fn default() -> Self {
        Self {
            initial: zero_expr(),
            min: None,
            max: None,
        }
    }
}

/// General model: coefficient expressions over `(t, x, y, u, v)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GeneralModelSpec {
    #[serde(default = "zero_expr")]
    pub drift: String,
    #[serde(default = "zero_expr")]
    pub diffusion: String,
    #[serde(default = "zero_expr")]
    pub running_cost: String,
    /// Terminal cost, an expression in `x`.
    #[serde(default = "zero_expr")]
    pub terminal_cost: String,
    pub x0: f64,
    #[serde(default)]
    pub control: ControlSpec,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
}

fn default_fd_step() -> f64 {
    1e-5
}

/// Moving-average LQ model; the delay fraction comes from the scenario's
/// proportional delay block.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LqModelSpec {
    pub x0: f64,
    #[serde(default = "zero_timefn")]
    pub drift_state: TimeFnSpec,
    #[serde(default = "zero_timefn")]
    pub drift_delayed: TimeFnSpec,
    #[serde(default = "zero_timefn")]
    pub drift_control: TimeFnSpec,
    #[serde(default = "zero_timefn")]
    pub drift_delayed_control: TimeFnSpec,
    #[serde(default = "zero_timefn")]
    pub diffusion_state: TimeFnSpec,
    #[serde(default = "zero_timefn")]
    pub diffusion_delayed: TimeFnSpec,
    #[serde(default = "zero_timefn")]
    pub diffusion_control: TimeFnSpec,
    #[serde(default = "zero_timefn")]
    pub diffusion_delayed_control: TimeFnSpec,
    #[serde(default = "zero_timefn")]
    pub state_weight: TimeFnSpec,
    #[serde(default = "zero_timefn")]
    pub delayed_weight: TimeFnSpec,
    #[serde(default = "one_timefn")]
    pub control_weight: TimeFnSpec,
    #[serde(default)]
    pub terminal_weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    General(GeneralModelSpec),
    Lq(LqModelSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub basis_degree: usize,
    pub ridge: f64,
    pub beta: f64,
    pub damping: f64,
    pub tol: f64,
    pub max_iterations: usize,
    pub picard_tol: f64,
    pub picard_max_sweeps: usize,
    pub fd_eps: Vec<f64>,
    /// Direction profile for gradient checks, an expression in `t`.
    pub direction: String,
    pub candidates: usize,
    pub perturbations: usize,
    pub gradient_rel_tol: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            basis_degree: 2,
            ridge: 0.0,
            beta: 1.0,
            damping: 0.5,
            tol: 1e-4,
            max_iterations: 50,
            picard_tol: 1e-12,
            picard_max_sweeps: 60,
            fd_eps: vec![0.1, 0.05],
            direction: "1".to_string(),
            candidates: 16,
            perturbations: 20,
            gradient_rel_tol: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub tag: String,
    pub grid: GridSpec,
    pub paths: usize,
    pub seed: u64,
    pub delay: DelaySpecConfig,
    pub model: ModelSpec,
    #[serde(default)]
    pub solver: SolverSpec,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let scenario: Scenario =
            serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(ScenarioError::Io)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let grid = self.time_grid()?;
        match &self.delay {
            DelaySpecConfig::Proportional { a } => {
                if !(*a > 0.0 && *a <= 1.0) {
                    return Err(ScenarioError::Validation(format!(
                        "delay.a: a must lie in (0,1], got {a}"
                    )));
                }
            }
            DelaySpecConfig::FixedLag { lag } => {
                if !(0.0..=grid.horizon()).contains(lag) {
                    return Err(ScenarioError::Validation(format!(
                        "delay.lag: must lie in [0, horizon], got {lag}"
                    )));
                }
            }
            DelaySpecConfig::RandomSlope { a_min, a_max } => {
                if !(*a_min > 0.0 && a_min <= a_max && *a_max <= 1.0) {
                    return Err(ScenarioError::Validation(format!(
                        "delay: slope range [{a_min}, {a_max}] invalid"
                    )));
                }
            }
            DelaySpecConfig::PiecewiseJump { rate, step } => {
                if !(*rate > 0.0) || !(*step > 0.0) {
                    return Err(ScenarioError::Validation(
                        "delay: rate and step must be positive".to_string(),
                    ));
                }
            }
        }
        if self.paths == 0 {
            return Err(ScenarioError::Validation(
                "paths: must be at least 1".to_string(),
            ));
        }
        let s = &self.solver;
        if s.basis_degree == 0 || s.basis_degree > 6 {
            return Err(ScenarioError::Validation(format!(
                "solver.basis_degree: must lie in 1..=6, got {}",
                s.basis_degree
            )));
        }
        if !(s.ridge >= 0.0) {
            return Err(ScenarioError::Validation(
                "solver.ridge: must be nonnegative".to_string(),
            ));
        }
        if !(s.damping > 0.0 && s.damping <= 1.0) {
            return Err(ScenarioError::Validation(format!(
                "solver.damping: must lie in (0,1], got {}",
                s.damping
            )));
        }
        if !(s.tol > 0.0) || !(s.picard_tol > 0.0) {
            return Err(ScenarioError::Validation(
                "solver tolerances must be positive".to_string(),
            ));
        }
        if s.fd_eps.is_empty() || s.fd_eps.iter().any(|e| !(*e > 0.0)) {
            return Err(ScenarioError::Validation(
                "solver.fd_eps: needs at least one positive step".to_string(),
            ));
        }
        match &self.model {
            ModelSpec::General(general) => {
                self.compile_general(general)?;
                if let (Some(lo), Some(hi)) = (general.control.min, general.control.max) {
                    if !(lo <= hi) {
                        return Err(ScenarioError::Validation(format!(
                            "model.control: min {lo} must not exceed max {hi}"
                        )));
                    }
                }
            }
            ModelSpec::Lq(lq_spec) => {
                if !matches!(self.delay, DelaySpecConfig::Proportional { .. }) {
                    return Err(ScenarioError::Validation(
                        "model.lq requires a proportional delay block".to_string(),
                    ));
                }
                if matches!(self.delay, DelaySpecConfig::Proportional { a } if a >= 1.0) {
                    return Err(ScenarioError::Validation(
                        "model.lq requires delay fraction a strictly below 1".to_string(),
                    ));
                }
                let lq = self.lq_coefficients(lq_spec)?;
                lq.validate(&grid)
                    .map_err(|e| ScenarioError::Validation(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn time_grid(&self) -> Result<TimeGrid, ScenarioError> {
        TimeGrid::new(self.grid.horizon, self.grid.n_steps)
            .map_err(|e| ScenarioError::Validation(e.to_string()))
    }

    pub fn basis(&self) -> RegressionBasis {
        RegressionBasis {
            degree: self.solver.basis_degree,
            ridge: self.solver.ridge,
        }
    }

    fn parse_expr(&self, field: &str, src: &str) -> Result<Expr, ScenarioError> {
        Expr::parse(src).map_err(|e| ScenarioError::Expression {
            field: field.to_string(),
            error: e.to_string(),
        })
    }

    /// Compiles the general model block to a coefficient set with symbolic
    /// partials where available (finite differences otherwise).
    pub fn compile_general(
        &self,
        general: &GeneralModelSpec,
    ) -> Result<CoefficientSet, ScenarioError> {
        let drift = self.parse_expr("model.drift", &general.drift)?;
        let diffusion = self.parse_expr("model.diffusion", &general.diffusion)?;
        let running_cost = self.parse_expr("model.running_cost", &general.running_cost)?;
        let terminal = self.parse_expr("model.terminal_cost", &general.terminal_cost)?;
        // control profile must be a function of time only
        let initial = self.parse_expr("model.control.initial", &general.control.initial)?;
        for var in [Var::X, Var::Y, Var::U, Var::V] {
            if initial.uses(var) {
                return Err(ScenarioError::Validation(
                    "model.control.initial: must depend on t only".to_string(),
                ));
            }
        }

        let mut builder = CoefficientSet::builder()
            .drift(eval5(drift.clone()))
            .diffusion(eval5(diffusion.clone()))
            .running_cost(eval5(running_cost.clone()))
            .terminal_cost({
                let e = terminal.clone();
                move |x| e.eval(&[0.0, x, 0.0, 0.0, 0.0])
            })
            .fd_step(general.fd_step);
        builder = attach_partials(builder, &drift, &diffusion, &running_cost);
        if let Some(slope) = terminal.derivative(Var::X) {
            builder = builder.terminal_slope(move |x| slope.eval(&[0.0, x, 0.0, 0.0, 0.0]));
        }
        Ok(builder.build())
    }

    pub fn lq_coefficients(&self, lq: &LqModelSpec) -> Result<LqCoefficients, ScenarioError> {
        let a = match self.delay {
            DelaySpecConfig::Proportional { a } => a,
            _ => {
                return Err(ScenarioError::Validation(
                    "model.lq requires a proportional delay block".to_string(),
                ))
            }
        };
        Ok(LqCoefficients {
            drift_state: lq.drift_state.to_time_fn(),
            drift_delayed: lq.drift_delayed.to_time_fn(),
            drift_control: lq.drift_control.to_time_fn(),
            drift_delayed_control: lq.drift_delayed_control.to_time_fn(),
            diffusion_state: lq.diffusion_state.to_time_fn(),
            diffusion_delayed: lq.diffusion_delayed.to_time_fn(),
            diffusion_control: lq.diffusion_control.to_time_fn(),
            diffusion_delayed_control: lq.diffusion_delayed_control.to_time_fn(),
            state_weight: lq.state_weight.to_time_fn(),
            delayed_weight: lq.delayed_weight.to_time_fn(),
            control_weight: lq.control_weight.to_time_fn(),
            terminal_weight: lq.terminal_weight,
            delay_fraction: a,
            initial_state: lq.x0,
        })
    }

    /// The model's initial state.
    pub fn initial_state(&self) -> f64 {
        match &self.model {
            ModelSpec::General(g) => g.x0,
            ModelSpec::Lq(l) => l.x0,
        }
    }

    /// Deterministic initial control profile of the scenario.
    pub fn initial_control_profile(&self) -> Result<Expr, ScenarioError> {
        match &self.model {
            ModelSpec::General(g) => self.parse_expr("model.control.initial", &g.control.initial),
            ModelSpec::Lq(_) => Ok(Expr::Const(0.0)),
        }
    }

    pub fn control_bounds(&self) -> (f64, f64) {
        match &self.model {
            ModelSpec::General(g) => (
                g.control.min.unwrap_or(f64::NEG_INFINITY),
                g.control.max.unwrap_or(f64::INFINITY),
            ),
            ModelSpec::Lq(_) => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    /// Canonical JSON used for the content digest.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("scenario serializes")
    }
}

fn eval5(e: Expr) -> impl Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static {
    move |t, x, y, u, v| e.eval(&[t, x, y, u, v])
}

fn attach_partials(
    mut builder: CoefficientSetBuilder,
    drift: &Expr,
    diffusion: &Expr,
    running_cost: &Expr,
) -> CoefficientSetBuilder {
    let slots = [
        (Var::X, Slot::State),
        (Var::Y, Slot::DelayedState),
        (Var::U, Slot::Control),
        (Var::V, Slot::DelayedControl),
    ];
    for (var, slot) in slots {
        if let Some(d) = drift.derivative(var) {
            builder = builder.drift_partial(slot, eval5(d));
        }
        if let Some(d) = diffusion.derivative(var) {
            builder = builder.diffusion_partial(slot, eval5(d));
        }
        if let Some(d) = running_cost.derivative(var) {
            builder = builder.cost_partial(slot, eval5(d));
        }
    }
    builder
}
