//! Numerical toolkit for stochastic optimal control with time-varying delay.
//!
//! The library simulates controlled SDEs whose coefficients read the state
//! and control at a delayed time `tau(t) <= t`, solves the anticipated
//! backward SDEs that arise as their adjoint equations, verifies
//! maximum-principle stationarity conditions through adjoint and
//! finite-difference Gateaux derivatives, and solves the moving-average
//! linear-quadratic control problem end to end.
//!
//! Everything lives on a shared uniform [`grid::TimeGrid`]; randomness is
//! counter-based and keyed by `(master_seed, stream, path)`, so every
//! computation is bit-reproducible for any worker count.

// validation guards are written `!(x > 0.0)` on purpose: the negation
// rejects NaN, which `x <= 0.0` would silently accept
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod absde;
pub mod brownian;
pub mod coeffs;
pub mod control;
pub mod delay;
pub mod ensemble;
pub mod error;
pub mod forward;
pub mod grid;
pub mod lq;
pub mod regression;
pub mod rng;
pub mod smp;

pub use absde::{
    beta_norm, build_adjoint_problem, fixed_point_solve, solve_absde, AbsdeProblem,
    AdjointEnsemble,
};
pub use brownian::{sample_brownian, BrownianBundle};
pub use coeffs::{
    check_coefficients, CoefKind, CoefficientReport, CoefficientSet, CoefficientSetBuilder, Slot,
};
pub use control::ControlProcess;
pub use delay::{pseudo_inverse, realize_delay, DelayMap, DelaySpec, InverseDelayMap, BEYOND};
pub use ensemble::PathArray;
pub use error::{Result, SmpError};
pub use forward::{euler_maruyama, picard_solve, PicardDiagnostics, StateEnsemble};
pub use grid::TimeGrid;
pub use lq::{
    lq_adjoint, lq_cost, lq_feedback, lq_feedback_residual, lq_forward, lq_solve,
    optimality_certificate, riccati_reference, CertificateReport, LqCoefficients, LqSolution,
    RiccatiReference, TimeFn,
};
pub use regression::{regress_conditional, ConditioningSet, FittedRegression, RegressionBasis};
pub use rng::CounterRng;
pub use smp::{
    cost_functional, duality_gap, gateaux_adjoint, gateaux_anticipated, gateaux_fd, hamiltonian,
    stationarity_residual, variational_inequality_check, variational_solve, DualityReport,
    FdEstimate, InequalityReport, StationarityResidual, VariationalEnsemble,
};
