use clap::{Args, Parser, Subcommand};
use smp_lab_cli::{artifact_dir, CliError, Scenario};
use std::path::PathBuf;
use std::process::ExitCode;

/// Numerical experiments for stochastic control with time-varying delay:
/// delayed SDE simulation, anticipated backward SDE solves,
/// maximum-principle checks and the moving-average LQ solver.
#[derive(Parser)]
#[command(name = "smp-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the scenario's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the scenario's path count.
    #[arg(long)]
    paths: Option<usize>,
    /// Root directory for artifacts (a per-run subdirectory is created).
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Worker thread count (falls back to SMP_LAB_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the delayed forward SDE and the Picard construction.
    SimulateForward(CommonArgs),
    /// Solve the adjoint anticipated BSDE by fixed-point iteration.
    SolveAbsde(CommonArgs),
    /// Stationarity residual and variational-inequality check.
    CheckSmp(CommonArgs),
    /// Solve the moving-average LQ problem and certify optimality.
    SolveLq(CommonArgs),
    /// Adjoint Gateaux derivative against the central-difference oracle.
    GradientCheck(CommonArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SimulateForward(_) => "simulate-forward",
            Command::SolveAbsde(_) => "solve-absde",
            Command::CheckSmp(_) => "check-smp",
            Command::SolveLq(_) => "solve-lq",
            Command::GradientCheck(_) => "gradient-check",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::SimulateForward(a)
            | Command::SolveAbsde(a)
            | Command::CheckSmp(a)
            | Command::SolveLq(a)
            | Command::GradientCheck(a) => a,
        }
    }
}

fn thread_count(args: &CommonArgs) -> Option<usize> {
    args.threads.or_else(|| {
        std::env::var("SMP_LAB_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
}

fn run(command: &Command) -> Result<(), CliError> {
    let args = command.args();
    let mut scenario = Scenario::load(&args.config)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(paths) = args.paths {
        scenario.paths = paths;
    }
    scenario.validate()?;
    let out = artifact_dir(&args.out, &scenario.tag, command.name());
    let quiet = args.quiet;
    let result = match command {
        Command::SimulateForward(_) => smp_lab_cli::cmd_simulate_forward(scenario, &out, quiet),
        Command::SolveAbsde(_) => smp_lab_cli::cmd_solve_absde(scenario, &out, quiet),
        Command::CheckSmp(_) => smp_lab_cli::cmd_check_smp(scenario, &out, quiet),
        Command::SolveLq(_) => smp_lab_cli::cmd_solve_lq(scenario, &out, quiet),
        Command::GradientCheck(_) => smp_lab_cli::cmd_gradient_check(scenario, &out, quiet),
    };
    result.map(|_| ())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args = cli.command.args();

    let outcome = match thread_count(args) {
        Some(threads) => {
            let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                Ok(pool) => pool,
                Err(e) => {
                    eprintln!("error: cannot build thread pool: {e}");
                    return ExitCode::from(2);
                }
            };
            pool.install(|| run(&cli.command))
        }
        None => run(&cli.command),
    };

    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
