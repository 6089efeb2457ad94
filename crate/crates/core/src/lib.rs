//! Numerical optimal control of backward stochastic dynamics over relaxed
//! (measure-valued) and strict control schedules.
//!
//! The state is the solution pair `(y, z)` of a backward equation
//! `dy = b(t, y, z, v) dt + z dW` with a prescribed terminal value, and the
//! cost is a terminal term plus a running term. Controls pick, per time
//! step, either one point of a finite grid ([`problem::StrictControlSchedule`])
//! or a probability weight vector over it ([`problem::RelaxedControlSchedule`]);
//! costs are linear in those weights.
//!
//! The pieces fit together as a pipeline:
//!
//! 1. [`paths::generate_paths`] draws a reproducible Brownian panel;
//! 2. [`bsde::solve_bsde`] runs the least-squares Monte Carlo backward
//!    sweep and [`bsde::evaluate_cost`] prices a schedule on it;
//! 3. [`adjoint::solve_adjoint`] propagates the first-order (costate)
//!    process forward along the stored trajectory;
//! 4. [`hamiltonian::hamiltonian_gap`] measures how far a schedule is from
//!    satisfying the pointwise maximum condition — zero gap is the
//!    first-order optimality certificate issued by [`verify::check_necessary`];
//! 5. [`optimizer::optimize`] runs conditional-gradient descent on the
//!    weights, using the gap as both direction oracle and stopping rule;
//! 6. [`chattering::chatter`] projects a relaxed optimum back to an
//!    ordinary switching control on a refined time grid, and
//!    [`chattering::value_equality_check`] confirms the values meet.
//!
//! Everything is deterministic given the seed: random numbers are
//! counter-based, path work is chunked in a fixed layout, and results are
//! identical for any worker count.

pub mod adjoint;
pub mod bsde;
pub mod builtin;
pub mod chattering;
pub mod error;
pub mod hamiltonian;
pub mod optimizer;
pub mod paths;
pub mod problem;
pub mod regression;
pub mod rng;
pub mod verify;

mod parallel;

pub use adjoint::{solve_adjoint, AdjointBundle};
pub use bsde::{
    evaluate_cost, solve_bsde, solve_variational_bsde, CostEstimate, SolveConfig, TrajectoryBundle,
    VariationalBundle,
};
pub use builtin::{build_builtin, builtin_names, builtin_problems, BuiltinProblem, InlineProblem};
pub use chattering::{chatter, compare_values, value_equality_check, ValueComparison};
pub use error::{Error, Result};
pub use hamiltonian::{best_response, hamiltonian_gap, GapReport};
pub use optimizer::{
    directional_derivative, optimize, DerivativeForm, OptimizeResult, OptimizerOptions, StepRule,
};
pub use paths::{generate_paths, PathBundle, PathView};
pub use problem::{
    dirac_embed, mix, validate_problem, ControlGrid, ProblemSpec, RelaxedControlSchedule,
    StrictControlSchedule, TimeGrid, ValidationReport,
};
pub use verify::{
    check_necessary, check_sufficient_hypotheses, Certificate, ControlInput, ConvexityReport,
};
