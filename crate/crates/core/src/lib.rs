//! Differentiable model predictive control.
//!
//! Linear MPC problems are solved as dense convex QPs, and gradients of the
//! optimal trajectory with respect to cost weights and the initial state are
//! obtained from one auxiliary equality-constrained problem that reuses a
//! single KKT factorization. Nonlinear MPC is handled by SQP, and the tuning
//! loop propagates closed-loop sensitivities through a simulated plant.

pub mod difftune;
pub mod experiments;
pub mod grad;
pub mod io;
pub mod lmpc;
pub mod nmpc;
pub mod parallel;
pub mod qp;
pub mod scalar;
pub mod systems;

pub use scalar::Scalar;

/// Double-precision aliases for the common types.
pub type LmpcProblem64 = lmpc::LmpcProblem<f64>;
pub type LmpcSolution64 = lmpc::LmpcSolution<f64>;
pub type Stage64 = lmpc::Stage<f64>;
pub type GradResult64 = grad::GradResult<f64>;
pub type GradientSolver64 = grad::GradientSolver<f64>;
pub type NmpcProblem64 = nmpc::NmpcProblem<f64>;
pub type QuadCostParams64 = difftune::QuadCostParams<f64>;
pub type ClosedLoopLog64 = difftune::ClosedLoopLog<f64>;

/// Single-precision aliases.
pub type LmpcProblem32 = lmpc::LmpcProblem<f32>;
pub type LmpcSolution32 = lmpc::LmpcSolution<f32>;
pub type GradResult32 = grad::GradResult<f32>;
