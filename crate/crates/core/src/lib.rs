//! Outer-gradient (hypergradient) estimation for bilevel optimization.
//!
//! A bilevel problem minimizes an outer loss `L^out(φ*θ, θ)` over θ, where
//! `φ*θ` minimizes an inner loss `L^in(·, θ)`. This crate provides:
//!
//! - [`problems`]: the callback interface and a suite of strongly convex problems,
//! - [`inner`]: first-phase and nudged-phase solvers,
//! - [`hypergrad`]: exact, first-order, RBP/Neumann, CG, and equilibrium-propagation estimators,
//! - [`bounds`]: experiments measuring estimator error against injected solver error,
//! - [`train`]: the outer training loop,
//! - [`cli`]: the `bilevel` command-line front end.

// NaN-rejecting guards are written as `!(x > 0.0)` on purpose; elimination kernels index rows directly.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bounds;
pub mod cli;
pub mod config;
pub mod error;
pub mod hypergrad;
pub mod inner;
pub mod linalg;
pub mod problems;
pub mod stencil;
pub mod train;

pub use error::{Error, Result};
pub use hypergrad::{EstimatorSpec, HypergradEstimate, Method, PiVector};
pub use inner::{InnerSolveReport, SolverConfig, SolverMethod};
pub use linalg::{DenseMat, Vector};
pub use problems::{BilevelProblem, ProblemInstance, ProblemSpec};
pub use stencil::{solve_fd_stencil, FdStencil, StencilKind};
