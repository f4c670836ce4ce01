//! The experiment subcommands: orchestration of the numerical layer plus
//! reproducible artifacts.

use crate::artifacts::{digest, ArtifactDir, RunSummary};
use crate::scenario::{ModelSpec, Scenario, ScenarioError};
use smp_lab_core::absde::{build_adjoint_problem, fixed_point_solve, solve_absde, AbsdeProblem};
use smp_lab_core::lq::{
    lq_adjoint_problem, lq_feedback_residual, lq_solve, optimality_certificate,
};
use smp_lab_core::regression::ConditioningSet;
use smp_lab_core::smp::{
    cost_functional, gateaux_adjoint, gateaux_fd, stationarity_residual,
    variational_inequality_check,
};
use smp_lab_core::{
    euler_maruyama, picard_solve, pseudo_inverse, realize_delay, sample_brownian, BrownianBundle,
    CoefficientSet, ControlProcess, DelayMap, InverseDelayMap, PathArray, SmpError, TimeGrid,
};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Scenario(#[from] ScenarioError),
    #[error("{0}")]
    Numerical(#[from] SmpError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checks failed: {0}")]
    ChecksFailed(String),
}

impl CliError {
    /// Exit-code contract: 0 success, 2 configuration error, 3 numerical
    /// failure, 4 acceptance-check failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Scenario(_) | CliError::Io(_) => 2,
            CliError::Numerical(SmpError::Config(_))
            | CliError::Numerical(SmpError::CoefficientValidation(_)) => 2,
            CliError::Numerical(_) => 3,
            CliError::ChecksFailed(_) => 4,
        }
    }
}

pub type CmdResult = Result<RunSummary, CliError>;

/// Everything a command needs, assembled once from the scenario.
struct RunContext {
    scenario: Scenario,
    grid: TimeGrid,
    bundle: BrownianBundle,
    delay: Arc<DelayMap>,
    theta: Arc<InverseDelayMap>,
    brownian: PathArray,
    coeffs: CoefficientSet,
    control: Arc<ControlProcess>,
    artifacts: ArtifactDir,
    summary: RunSummary,
}

impl RunContext {
    fn build(command: &str, scenario: Scenario, out_dir: &Path) -> Result<Self, CliError> {
        let grid = scenario.time_grid()?;
        let started = Instant::now();
        let bundle = sample_brownian(&grid, scenario.paths, scenario.seed)?;
        let delay = Arc::new(realize_delay(
            &scenario.delay.to_delay_spec(),
            &grid,
            scenario.paths,
            scenario.seed,
        )?);
        let theta = Arc::new(pseudo_inverse(&delay, &grid));
        let brownian = bundle.cumulative();

        let coeffs = match &scenario.model {
            ModelSpec::General(g) => scenario.compile_general(g)?,
            ModelSpec::Lq(l) => scenario.lq_coefficients(l)?.to_coefficient_set(),
        };
        let profile = scenario.initial_control_profile()?;
        let (lower, upper) = scenario.control_bounds();
        let row: Vec<f64> = grid
            .nodes()
            .map(|t| profile.eval(&[t, 0.0, 0.0, 0.0, 0.0]))
            .collect();
        let control = Arc::new(ControlProcess {
            values: PathArray::broadcast_row(scenario.paths, row),
            lower,
            upper,
        });
        control.validate()?;

        let digest = digest(scenario.canonical_json().as_bytes());
        let mut summary = RunSummary::new(
            command,
            &scenario.tag,
            digest,
            scenario.seed,
            scenario.paths,
        );
        summary.timing("setup", started.elapsed());
        let artifacts = ArtifactDir::create(out_dir)?;
        Ok(Self {
            scenario,
            grid,
            bundle,
            delay,
            theta,
            brownian,
            coeffs,
            control,
            artifacts,
            summary,
        })
    }

    fn adjoint_problem(
        &self,
        star: &smp_lab_core::StateEnsemble,
    ) -> Result<AbsdeProblem, CliError> {
        match &self.scenario.model {
            ModelSpec::General(_) => Ok(build_adjoint_problem(
                &self.coeffs,
                star,
                &self.control,
                self.theta.clone(),
            )?),
            ModelSpec::Lq(spec) => {
                let lq = self.scenario.lq_coefficients(spec)?;
                Ok(lq_adjoint_problem(&lq, star, self.theta.clone()))
            }
        }
    }

    fn finish(mut self, quiet: bool, total: Instant) -> CmdResult {
        self.summary.timing("total", total.elapsed());
        self.artifacts.write_summary(&self.summary)?;
        if !quiet {
            println!(
                "[{}] {} -> {}",
                self.summary.command,
                self.summary.tag,
                self.artifacts.path("run_summary.txt").display()
            );
            for (name, ok) in &self.summary.flags {
                println!("  check {name}: {}", if *ok { "PASS" } else { "FAIL" });
            }
        }
        if self.summary.all_passed() {
            Ok(self.summary)
        } else {
            let failed: Vec<String> = self
                .summary
                .flags
                .iter()
                .filter(|(_, ok)| !ok)
                .map(|(name, _)| name.clone())
                .collect();
            Err(CliError::ChecksFailed(failed.join(", ")))
        }
    }
}

/// Forward simulation: path summaries plus the Picard construction with
/// its gap sequence.
pub fn cmd_simulate_forward(scenario: Scenario, out_dir: &Path, quiet: bool) -> CmdResult {
    let total = Instant::now();
    let mut ctx = RunContext::build("simulate-forward", scenario, out_dir)?;
    let x0 = ctx.scenario.initial_state();

    let started = Instant::now();
    let state = euler_maruyama(
        &ctx.coeffs,
        ctx.control.clone(),
        ctx.delay.clone(),
        &ctx.bundle,
        x0,
    )?;
    ctx.summary.timing("euler", started.elapsed());
    ctx.artifacts
        .write_process_summary("state_summary.csv", &ctx.grid, &state.values)?;
    let last = ctx.grid.n_steps();
    ctx.summary.metric("terminal_mean", state.values.node_mean(last));
    ctx.summary
        .metric("terminal_var", state.values.node_variance(last));

    let started = Instant::now();
    let picard = picard_solve(
        &ctx.coeffs,
        ctx.control.clone(),
        ctx.delay.clone(),
        &ctx.bundle,
        x0,
        ctx.scenario.solver.picard_max_sweeps,
        ctx.scenario.solver.picard_tol,
    );
    ctx.summary.timing("picard", started.elapsed());
    match picard {
        Ok((_, diagnostics)) => {
            ctx.artifacts
                .write_gap_table("picard_gaps.csv", &diagnostics.gaps)?;
            ctx.summary
                .metric("picard_iterations", diagnostics.iterations as f64);
            ctx.summary.metric(
                "picard_last_gap",
                diagnostics.gaps.last().copied().unwrap_or(0.0),
            );
            ctx.summary.flag("picard_converged", diagnostics.converged);
        }
        Err(SmpError::NoConvergence { iterations, gaps }) => {
            ctx.artifacts.write_gap_table("picard_gaps.csv", &gaps)?;
            ctx.artifacts.write(
                "diagnostic.txt",
                &format!("picard did not converge after {iterations} sweeps\ngaps: {gaps:?}\n"),
            )?;
            return Err(CliError::Numerical(SmpError::NoConvergence {
                iterations,
                gaps,
            }));
        }
        Err(e) => return Err(e.into()),
    }
    ctx.finish(quiet, total)
}

/// Backward solve of the adjoint anticipated BSDE by fixed-point
/// iteration, with summaries of the solution pair and the gap sequence.
pub fn cmd_solve_absde(scenario: Scenario, out_dir: &Path, quiet: bool) -> CmdResult {
    let total = Instant::now();
    let mut ctx = RunContext::build("solve-absde", scenario, out_dir)?;
    let x0 = ctx.scenario.initial_state();

    let state = euler_maruyama(
        &ctx.coeffs,
        ctx.control.clone(),
        ctx.delay.clone(),
        &ctx.bundle,
        x0,
    )?;
    let problem = ctx.adjoint_problem(&state)?;
    let cond = ConditioningSet::state_and_brownian(&state.values, &ctx.brownian)
        .with_delay(&ctx.delay);
    let basis = ctx.scenario.basis();

    let started = Instant::now();
    let solve = fixed_point_solve(
        &problem,
        &ctx.bundle,
        &cond,
        &basis,
        ctx.scenario.solver.beta,
        ctx.scenario.solver.max_iterations,
        ctx.scenario.solver.tol,
    );
    ctx.summary.timing("fixed_point", started.elapsed());
    let (adjoint, gaps) = match solve {
        Ok(ok) => ok,
        Err(SmpError::ContractionFailure { gaps, ratios }) => {
            ctx.artifacts.write_gap_table("absde_gaps.csv", &gaps)?;
            ctx.artifacts.write(
                "diagnostic.txt",
                &format!("fixed point diverging\ngaps: {gaps:?}\nratios: {ratios:?}\n"),
            )?;
            return Err(CliError::Numerical(SmpError::ContractionFailure {
                gaps,
                ratios,
            }));
        }
        Err(SmpError::NoConvergence { iterations, gaps }) => {
            ctx.artifacts.write_gap_table("absde_gaps.csv", &gaps)?;
            ctx.artifacts.write(
                "diagnostic.txt",
                &format!("fixed point not converged after {iterations} sweeps\n"),
            )?;
            return Err(CliError::Numerical(SmpError::NoConvergence {
                iterations,
                gaps,
            }));
        }
        Err(e) => return Err(e.into()),
    };

    ctx.artifacts
        .write_process_summary("y_summary.csv", &ctx.grid, &adjoint.y)?;
    ctx.artifacts
        .write_process_summary("z_summary.csv", &ctx.grid, &adjoint.z)?;
    ctx.artifacts.write_gap_table("absde_gaps.csv", &gaps)?;
    ctx.summary.metric("y0_mean", adjoint.y.node_mean(0));
    ctx.summary.metric(
        "beta_norm",
        smp_lab_core::beta_norm(&adjoint, ctx.scenario.solver.beta),
    );
    ctx.summary.metric("iterations", gaps.len() as f64);
    ctx.summary
        .metric("last_gap", gaps.last().copied().unwrap_or(0.0));
    let max_ratio = gaps
        .windows(2)
        .map(|w| w[1] / w[0])
        .fold(0.0f64, f64::max);
    ctx.summary.metric("max_gap_ratio", max_ratio);
    ctx.finish(quiet, total)
}

/// Stationarity residual and the variational-inequality check along the
/// scenario's control.
pub fn cmd_check_smp(scenario: Scenario, out_dir: &Path, quiet: bool) -> CmdResult {
    let total = Instant::now();
    let mut ctx = RunContext::build("check-smp", scenario, out_dir)?;
    let x0 = ctx.scenario.initial_state();

    let state = euler_maruyama(
        &ctx.coeffs,
        ctx.control.clone(),
        ctx.delay.clone(),
        &ctx.bundle,
        x0,
    )?;
    let problem = ctx.adjoint_problem(&state)?;
    let cond = ConditioningSet::state_and_brownian(&state.values, &ctx.brownian)
        .with_delay(&ctx.delay);
    let basis = ctx.scenario.basis();
    let adjoint = solve_absde(&problem, &ctx.bundle, &cond, &basis)?;

    let started = Instant::now();
    let residual = stationarity_residual(
        &ctx.coeffs,
        &state,
        &ctx.control,
        &adjoint,
        &ctx.theta,
        &cond,
        &basis,
    )?;
    ctx.summary.timing("residual", started.elapsed());
    ctx.artifacts
        .write_process_summary("residual_summary.csv", &ctx.grid, &residual.values)?;
    ctx.summary.metric("residual_sup_l2", residual.sup_l2);

    let report = variational_inequality_check(
        &residual,
        &ctx.control,
        ctx.scenario.solver.candidates,
        ctx.scenario.seed ^ 0x5EED_CAFE,
    )?;
    let mut text = String::from("candidate,min_node_mean,max_std_error,min_pointwise,verdict\n");
    for (i, c) in report.candidates.iter().enumerate() {
        let _ = writeln!(
            text,
            "{i},{},{},{},{}",
            c.min_node_mean,
            c.max_std_error,
            c.min_pointwise,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    ctx.artifacts.write("inequality_report.csv", &text)?;
    ctx.summary.flag("variational_inequality", report.passed);
    ctx.finish(quiet, total)
}

/// Full moving-average LQ solve with the optimality certificate.
pub fn cmd_solve_lq(scenario: Scenario, out_dir: &Path, quiet: bool) -> CmdResult {
    let total = Instant::now();
    let lq = match &scenario.model {
        ModelSpec::Lq(spec) => scenario.lq_coefficients(spec)?,
        ModelSpec::General(_) => {
            return Err(CliError::Scenario(ScenarioError::Validation(
                "solve-lq needs the scenario's model.lq block".to_string(),
            )))
        }
    };
    let mut ctx = RunContext::build("solve-lq", scenario, out_dir)?;
    let basis = ctx.scenario.basis();

    let started = Instant::now();
    let solution = match lq_solve(
        &lq,
        &ctx.bundle,
        &basis,
        ctx.scenario.solver.max_iterations,
        ctx.scenario.solver.tol,
        ctx.scenario.solver.damping,
    ) {
        Ok(ok) => ok,
        Err(SmpError::NoConvergence { iterations, gaps })  => {
            ctx.artifacts.write_gap_table("trace.csv", &gaps)?;
            ctx.artifacts.write(
                "diagnostic.txt",
                &format!("fixed point not converged after {iterations} iterations\n"),
            )?;
            return Err(CliError::Numerical(SmpError::NoConvergence {
                iterations,
                gaps,
            }));
        }
        Err(SmpError::ContractionFailure { gaps, ratios }) => {
            ctx.artifacts.write_gap_table("trace.csv", &gaps)?;
            ctx.artifacts.write(
                "diagnostic.txt",
                &format!("fixed point diverging\nratios: {ratios:?}\n"),
            )?;
            return Err(CliError::Numerical(SmpError::ContractionFailure {
                gaps,
                ratios,
            }));
        }
        Err(e) => return Err(e.into()),
    };
    ctx.summary.timing("lq_solve", started.elapsed());

    ctx.artifacts
        .write_process_summary("control_summary.csv", &ctx.grid, &solution.control.values)?;
    ctx.artifacts
        .write_process_summary("state_summary.csv", &ctx.grid, &solution.state.values)?;
    ctx.artifacts
        .write_process_summary("adjoint_p_summary.csv", &ctx.grid, &solution.adjoint.y)?;
    ctx.artifacts
        .write_process_summary("adjoint_q_summary.csv", &ctx.grid, &solution.adjoint.z)?;
    {
        let mut text = String::from("k,change,cost\n");
        for (k, change) in solution.trace.iter().enumerate() {
            let _ = writeln!(text, "{k},{change},{}", solution.cost_trace[k]);
        }
        ctx.artifacts.write("trace.csv", &text)?;
    }
    ctx.summary.metric("cost", solution.cost);
    ctx.summary.metric("cost_std_error", solution.cost_std_error);
    ctx.summary.metric("iterations", solution.trace.len() as f64);
    ctx.summary.flag("converged", solution.converged);
    // diagnostic only: after the damping burn-in the cost trace should
    // not increase; violations are recorded, not fatal
    let burn_in = 2.min(solution.cost_trace.len());
    let monotone = solution.cost_trace[burn_in..]
        .windows(2)
        .all(|w| w[1] <= w[0] + 1e-12 * w[0].abs());
    ctx.summary
        .metric("cost_trace_monotone_after_burnin", monotone as u8 as f64);
    if !monotone && !quiet {
        println!("  note: cost trace not monotone after burn-in (diagnostic)");
    }

    let residual = lq_feedback_residual(&lq, &solution, &ctx.bundle, &basis)?;
    ctx.summary.metric("feedback_residual", residual);
    ctx.summary.flag(
        "feedback_residual_within_10_tol",
        residual <= 10.0 * ctx.scenario.solver.tol,
    );

    let started = Instant::now();
    let certificate = optimality_certificate(
        &lq,
        &solution,
        &ctx.bundle,
        ctx.scenario.solver.perturbations,
        &ctx.scenario.solver.fd_eps,
        ctx.scenario.seed ^ 0xCE27_1F1C,
    )?;
    ctx.summary.timing("certificate", started.elapsed());
    {
        let mut text = String::from("eps,cost_gap,std_error,verdict\n");
        for p in &certificate.perturbations {
            let _ = writeln!(
                text,
                "{},{},{},{}",
                p.eps,
                p.cost_gap,
                p.std_error,
                if p.passed { "PASS" } else { "FAIL" }
            );
        }
        let _ = writeln!(text, "min_cost_gap,{},,", certificate.min_cost_gap);
        let _ = writeln!(text, "midpoint_residual,{},,", certificate.midpoint_residual);
        ctx.artifacts.write("certificate_report.csv", &text)?;
    }
    ctx.summary
        .metric("certificate_min_gap", certificate.min_cost_gap);
    ctx.summary
        .metric("midpoint_residual", certificate.midpoint_residual);
    ctx.summary.flag("certificate", certificate.passed);
    ctx.finish(quiet, total)
}

/// Adjoint-based Gateaux derivative against the central-difference oracle
/// under common random numbers.
pub fn cmd_gradient_check(scenario: Scenario, out_dir: &Path, quiet: bool) -> CmdResult {
    let total = Instant::now();
    let mut ctx = RunContext::build("gradient-check", scenario, out_dir)?;
    let x0 = ctx.scenario.initial_state();

    let state = euler_maruyama(
        &ctx.coeffs,
        ctx.control.clone(),
        ctx.delay.clone(),
        &ctx.bundle,
        x0,
    )?;
    let problem = ctx.adjoint_problem(&state)?;
    let cond = ConditioningSet::state_and_brownian(&state.values, &ctx.brownian)
        .with_delay(&ctx.delay);
    let basis = ctx.scenario.basis();
    let adjoint = solve_absde(&problem, &ctx.bundle, &cond, &basis)?;

    let dir_expr = crate::expr::Expr::parse(&ctx.scenario.solver.direction).map_err(|e| {
        ScenarioError::Expression {
            field: "solver.direction".to_string(),
            error: e.to_string(),
        }
    })?;
    let direction = ControlProcess::from_profile(&ctx.grid, ctx.scenario.paths, |t| {
        dir_expr.eval(&[t, 0.0, 0.0, 0.0, 0.0])
    });

    let started = Instant::now();
    let (adj_value, adj_se) =
        gateaux_adjoint(&ctx.coeffs, &state, &ctx.control, &direction, &adjoint)?;
    let fd = gateaux_fd(
        &ctx.coeffs,
        x0,
        &ctx.control,
        &direction,
        &ctx.delay,
        &ctx.bundle,
        &ctx.scenario.solver.fd_eps,
    )?;
    ctx.summary.timing("gradient", started.elapsed());

    {
        let mut text = String::from("eps,central_difference\n");
        for (eps, value) in &fd.per_eps {
            let _ = writeln!(text, "{eps},{value}");
        }
        let _ = writeln!(text, "extrapolated,{}", fd.value);
        let _ = writeln!(text, "adjoint,{adj_value}");
        ctx.artifacts.write("gradient_table.csv", &text)?;
    }
    let rel_err = (adj_value - fd.value).abs() / fd.value.abs().max(1e-12);
    ctx.summary.metric("adjoint_value", adj_value);
    ctx.summary.metric("adjoint_std_error", adj_se);
    ctx.summary.metric("fd_value", fd.value);
    ctx.summary.metric("fd_std_error", fd.std_error);
    ctx.summary.metric("richardson_spread", fd.spread);
    ctx.summary.metric("rel_err", rel_err);
    ctx.summary.flag(
        "gradient_match",
        rel_err <= ctx.scenario.solver.gradient_rel_tol,
    );

    // cost at the evaluation point, for the record
    let (cost, cost_se) = cost_functional(&ctx.coeffs, &state, &ctx.control);
    ctx.summary.metric("cost", cost);
    ctx.summary.metric("cost_std_error", cost_se);
    ctx.finish(quiet, total)
}

/// Resolves the artifact directory of a command run.
pub fn artifact_dir(out_root: &Path, tag: &str, command: &str) -> PathBuf {
    out_root.join(format!("{tag}-{command}"))
}
