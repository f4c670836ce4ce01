//! Scenario loading, experiment commands and artifact writing for the
//! delayed stochastic control toolkit.

// validation guards are written `!(x > 0.0)` on purpose: the negation
// rejects NaN, which `x <= 0.0` would silently accept
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod commands;
pub mod expr;
pub mod scenario;

pub use commands::{
    artifact_dir, cmd_check_smp, cmd_gradient_check, cmd_simulate_forward, cmd_solve_absde,
    cmd_solve_lq, CliError, CmdResult,
};
pub use scenario::{Scenario, ScenarioError};
