//! Outer-gradient estimators.
//!
//! Implicit-differentiation methods approximate `π* = ∂φL^out (∂²φL^in)⁻¹`
//! in a second phase and assemble `∇θ = ∂θL^out − π·∂θ∂φL^in`. Equilibrium
//! propagation instead differentiates `β ↦ ∂θ𝓛(φ*β, θ, β)` at zero with a
//! finite-difference stencil over nudged equilibria.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::inner::{minimize_augmented, solve_exact, InnerSolveReport, SolverConfig};
use crate::linalg::{all_finite, materialize, power_iteration, solve_spd, Vector};
use crate::problems::{check_point, BilevelProblem};
use crate::stencil::{solve_fd_stencil, FdStencil, StencilKind};

/// ‖π‖ beyond which recurrent backpropagation is declared divergent.
pub const RBP_DIVERGENCE_NORM: f64 = 1e12;

/// Power iterations used to derive the default RBP rate `α = 1/L`.
pub const RBP_POWER_ITERS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Oracle,
    FirstOrder,
    Identity,
    Rbp,
    Cg,
    Ep,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Oracle => "oracle",
            Method::FirstOrder => "first_order",
            Method::Identity => "identity",
            Method::Rbp => "rbp",
            Method::Cg => "cg",
            Method::Ep => "ep",
        };
        f.write_str(s)
    }
}

/// Approximation of the row vector π, stored as a column.
#[derive(Debug, Clone, PartialEq)]
pub struct PiVector(pub Vector);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypergradEstimate {
    #[serde(with = "crate::linalg::serde_vector")]
    pub grad: Vector,
    pub method: Method,
    pub phase2_iters: usize,
    pub hvp_count: usize,
    pub inner_solve_count: usize,
    pub beta: Option<f64>,
    /// Second-phase residual: `‖πH − ∂φL^out‖` for CG, last update norm for
    /// RBP, worst nudged-phase gradient norm for EP.
    pub residual: Option<f64>,
    #[serde(with = "crate::linalg::serde_vector::option", default)]
    pub pi: Option<Vector>,
}

impl HypergradEstimate {
    fn implicit(grad: Vector, method: Method, iters: usize, hvps: usize, residual: Option<f64>, pi: Option<Vector>) -> Result<Self> {
        if !all_finite(&grad) {
            return Err(Error::NonFinite("hypergradient"));
        }
        Ok(Self {
            grad,
            method,
            phase2_iters: iters,
            hvp_count: hvps,
            inner_solve_count: 0,
            beta: None,
            residual,
            pi,
        })
    }
}

/// `∂θL^out(φ̂, θ) − π̂ · ∂θ∂φL^in(φ̂, θ)`.
pub fn assemble_gradient(
    problem: &dyn BilevelProblem,
    phi_hat: &Vector,
    theta: &Vector,
    pi: &PiVector,
) -> Result<Vector> {
    check_point(problem, phi_hat, theta)?;
    check_dim(phi_hat.len(), pi.0.len())?;
    Ok(problem.grad_theta_outer(phi_hat, theta) - problem.cross_vjp_inner(phi_hat, theta, &pi.0))
}

/// Exact implicit-function-theorem gradient with a dense Hessian.
pub fn oracle_exact(problem: &dyn BilevelProblem, phi_hat: &Vector, theta: &Vector) -> Result<HypergradEstimate> {
    check_point(problem, phi_hat, theta)?;
    let n = phi_hat.len();
    let h = materialize(|v| problem.hvp_inner(phi_hat, theta, v), n)?;
    let g = problem.grad_phi_outer(phi_hat, theta);
    let pi = solve_spd(&h, &g)?;
    let residual = (&h * &pi - &g).norm();
    let grad = assemble_gradient(problem, phi_hat, theta, &PiVector(pi.clone()))?;
    HypergradEstimate::implicit(grad, Method::Oracle, 0, n, Some(residual), Some(pi))
}

/// π̂ = 0: the direct derivative `∂θL^out`.
pub fn first_order(problem: &dyn BilevelProblem, phi_hat: &Vector, theta: &Vector) -> Result<HypergradEstimate> {
    check_point(problem, phi_hat, theta)?;
    let grad = problem.grad_theta_outer(phi_hat, theta);
    HypergradEstimate::implicit(grad, Method::FirstOrder, 0, 0, None, Some(Vector::zeros(phi_hat.len())))
}

/// Hessian replaced by the identity, so π̂ = ∂φL^out.
pub fn one_step_identity(problem: &dyn BilevelProblem, phi_hat: &Vector, theta: &Vector) -> Result<HypergradEstimate> {
    check_point(problem, phi_hat, theta)?;
    let pi = problem.grad_phi_outer(phi_hat, theta);
    let grad = assemble_gradient(problem, phi_hat, theta, &PiVector(pi.clone()))?;
    HypergradEstimate::implicit(grad, Method::Identity, 0, 0, None, Some(pi))
}

/// `1/L` with `L` the top Ritz value of the inner Hessian at `φ̂`.
pub fn default_rbp_rate(problem: &dyn BilevelProblem, phi_hat: &Vector, theta: &Vector) -> f64 {
    let l = power_iteration(|v| problem.hvp_inner(phi_hat, theta, v), phi_hat.len(), RBP_POWER_ITERS, 0);
    if l > 0.0 && l.is_finite() {
        1.0 / l
    } else {
        1.0
    }
}

/// The recurrent-backpropagation iterate `π ← π − α(πH − ∂φL^out)` from π₀ = 0.
///
/// Returns `(π, iterations, last update norm)`. After `k` updates π equals the
/// Neumann partial sum `α Σ_{i<k} ∂φL^out (Id − αH)ⁱ`.
pub fn rbp_pi(
    problem: &dyn BilevelProblem,
    phi_hat: &Vector,
    theta: &Vector,
    alpha: f64,
    k: usize,
    tol: f64,
) -> Result<(Vector, usize, f64)> {
    check_point(problem, phi_hat, theta)?;
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!("alpha must be > 0, got {alpha}")));
    }
    let g = problem.grad_phi_outer(phi_hat, theta);
    let mut pi = Vector::zeros(phi_hat.len());
    let mut last = 0.0;
    let mut iters = 0;
    while iters < k {
        let update = (&g - problem.hvp_inner(phi_hat, theta, &pi)) * alpha;
        pi += &update;
        iters += 1;
        last = update.norm();
        let norm = pi.norm();
        if !norm.is_finite() || norm > RBP_DIVERGENCE_NORM {
            return Err(Error::Diverged { iters });
        }
        if last <= tol {
            break;
        }
    }
    Ok((pi, iters, last))
}

pub fn rbp_neumann(
    problem: &dyn BilevelProblem,
    phi_hat: &Vector,
    theta: &Vector,
    alpha: f64,
    k: usize,
    tol: f64,
) -> Result<HypergradEstimate> {
    let (pi, iters, last) = rbp_pi(problem, phi_hat, theta, alpha, k, tol)?;
    let grad = assemble_gradient(problem, phi_hat, theta, &PiVector(pi.clone()))?;
    HypergradEstimate::implicit(grad, Method::Rbp, iters, iters, Some(last), Some(pi))
}

/// Conjugate gradients on `πH = ∂φL^out` from π₀ = 0, stopping once
/// `‖r‖ ≤ tol·(1 + ‖∂φL^out‖)`.
pub fn cg_pi(
    problem: &dyn BilevelProblem,
    phi_hat: &Vector,
    theta: &Vector,
    max_iters: usize,
    tol: f64,
) -> Result<(Vector, usize, f64)> {
    check_point(problem, phi_hat, theta)?;
    if max_iters == 0 {
        return Err(Error::InvalidParameter("CG needs max_iters >= 1".into()));
    }
    let g = problem.grad_phi_outer(phi_hat, theta);
    let threshold = tol * (1.0 + g.norm());
    let mut pi = Vector::zeros(g.len());
    let mut r = g.clone();
    let mut p = r.clone();
    let mut rs = r.norm_squared();
    let mut iters = 0;
    while rs.sqrt() > threshold && iters < max_iters {
        let hp = problem.hvp_inner(phi_hat, theta, &p);
        iters += 1;
        let curvature = p.dot(&hp);
        if !(curvature > 0.0) {
            return Err(Error::IndefiniteDetected { iter: iters, curvature });
        }
        let step = rs / curvature;
        pi.axpy(step, &p, 1.0);
        r.axpy(-step, &hp, 1.0);
        let rs_next = r.norm_squared();
        p = &r + &p * (rs_next / rs);
        rs = rs_next;
    }
    Ok((pi, iters, rs.sqrt()))
}

pub fn conjugate_gradient(
    problem: &dyn BilevelProblem,
    phi_hat: &Vector,
    theta: &Vector,
    max_iters: usize,
    tol: f64,
) -> Result<HypergradEstimate> {
    let (pi, iters, residual) = cg_pi(problem, phi_hat, theta, max_iters, tol)?;
    let grad = assemble_gradient(problem, phi_hat, theta, &PiVector(pi.clone()))?;
    HypergradEstimate::implicit(grad, Method::Cg, iters, iters, Some(residual), Some(pi))
}

/// How nudged phases are minimized.
#[derive(Debug, Clone, Copy)]
pub enum PhaseSolver<'a> {
    /// Gradient descent with the given configuration.
    Descent(&'a SolverConfig),
    /// Dense Newton polish to machine precision (desk-scale experiments).
    Exact,
}

/// `∂θ𝓛(φ, θ, β) = ∂θL^in + β·∂θL^out`.
pub fn augmented_theta_grad(problem: &dyn BilevelProblem, phi: &Vector, theta: &Vector, beta: f64) -> Vector {
    let g = problem.grad_theta_inner(phi, theta);
    if beta == 0.0 {
        g
    } else {
        g + problem.grad_theta_outer(phi, theta) * beta
    }
}

/// Equilibrium-propagation estimate with warm-started (chained) phases.
pub fn ep_estimate(
    problem: &dyn BilevelProblem,
    theta: &Vector,
    phi0_hat: &Vector,
    stencil: &FdStencil,
    solver: &SolverConfig,
) -> Result<HypergradEstimate> {
    ep_estimate_with(problem, theta, phi0_hat, stencil, PhaseSolver::Descent(solver), true)
}

/// Equilibrium-propagation estimate.
///
/// Forward stencils visit `β, 2β, …` in order; with `chain` each phase starts
/// from the previous node's solution, otherwise every phase starts from φ̂₀.
/// Symmetric stencils start both `±β` phases from φ̂₀. Node 0 reuses φ̂₀, so
/// `inner_solve_count` counts only non-zero nodes.
pub fn ep_estimate_with(
    problem: &dyn BilevelProblem,
    theta: &Vector,
    phi0_hat: &Vector,
    stencil: &FdStencil,
    solver: PhaseSolver<'_>,
    chain: bool,
) -> Result<HypergradEstimate> {
    check_point(problem, phi0_hat, theta)?;
    let beta = stencil.step;
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::NonPositiveBeta(beta));
    }
    let mut total = Vector::zeros(theta.len());
    let mut solves = 0;
    let mut iters = 0;
    let mut worst: f64 = 0.0;
    let mut previous = phi0_hat.clone();
    for (node, coeff) in stencil.terms() {
        let phi = if node == 0 {
            phi0_hat.clone()
        } else {
            let start = match stencil.kind {
                StencilKind::Forward if chain => &previous,
                _ => phi0_hat,
            };
            let nudge = node as f64 * beta;
            let rep = run_phase(problem, theta, nudge, start, solver)?;
            solves += 1;
            iters += rep.iters;
            worst = worst.max(rep.final_grad_norm);
            rep.phi_hat
        };
        if coeff != 0.0 {
            total += augmented_theta_grad(problem, &phi, theta, node as f64 * beta) * coeff;
        }
        previous = phi;
    }
    let grad = total / beta;
    if !all_finite(&grad) {
        return Err(Error::NonFinite("hypergradient"));
    }
    Ok(HypergradEstimate {
        grad,
        method: Method::Ep,
        phase2_iters: iters,
        hvp_count: 0,
        inner_solve_count: solves,
        beta: Some(beta),
        residual: Some(worst),
        pi: None,
    })
}

fn run_phase(
    problem: &dyn BilevelProblem,
    theta: &Vector,
    beta: f64,
    start: &Vector,
    solver: PhaseSolver<'_>,
) -> Result<InnerSolveReport> {
    let result = match solver {
        PhaseSolver::Descent(cfg) => minimize_augmented(problem, theta, beta, start, cfg),
        PhaseSolver::Exact => solve_exact(problem, theta, beta, start),
    };
    result.map_err(|e| match e {
        Error::NegativeBetaNotEnabled(_) => e,
        other => Error::PhaseDiverged {
            beta,
            source: Box::new(other),
        },
    })
}

/// `(φ̂₀ − φ̂β)/β`, a finite-difference estimate of `−dβ φ*` that tends to π*.
pub fn ep_pi_recover(phi0_hat: &Vector, phi_beta_hat: &Vector, beta: f64) -> Result<PiVector> {
    check_dim(phi0_hat.len(), phi_beta_hat.len())?;
    if beta == 0.0 || !beta.is_finite() {
        return Err(Error::NonPositiveBeta(beta));
    }
    Ok(PiVector((phi0_hat - phi_beta_hat) / beta))
}

fn d_k() -> usize {
    1000
}
fn d_cg_tol() -> f64 {
    1e-10
}
fn d_points() -> usize {
    2
}
fn d_kind() -> StencilKind {
    StencilKind::Forward
}
fn d_beta() -> f64 {
    1e-3
}
fn d_true() -> bool {
    true
}

/// Estimator selection as it appears in a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorSpec {
    Oracle,
    FirstOrder,
    Identity,
    Rbp {
        /// `None` means `1/L` from power iteration.
        #[serde(default)]
        alpha: Option<f64>,
        #[serde(default = "d_k")]
        k: usize,
        #[serde(default)]
        tol: f64,
    },
    Cg {
        #[serde(default = "d_k")]
        max_iters: usize,
        #[serde(default = "d_cg_tol")]
        tol: f64,
    },
    Ep {
        #[serde(default = "d_points")]
        points: usize,
        #[serde(default = "d_kind")]
        kind: StencilKind,
        #[serde(default = "d_beta")]
        beta: f64,
        #[serde(default)]
        allow_negative_beta: bool,
        #[serde(default = "d_true")]
        chain: bool,
    },
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        EstimatorSpec::Cg { max_iters: d_k(), tol: d_cg_tol() }
    }
}

impl EstimatorSpec {
    pub fn method(&self) -> Method {
        match self {
            EstimatorSpec::Oracle => Method::Oracle,
            EstimatorSpec::FirstOrder => Method::FirstOrder,
            EstimatorSpec::Identity => Method::Identity,
            EstimatorSpec::Rbp { .. } => Method::Rbp,
            EstimatorSpec::Cg { .. } => Method::Cg,
            EstimatorSpec::Ep { .. } => Method::Ep,
        }
    }

    /// Run the selected estimator at `(φ̂, θ)`. EP phases use `solver`.
    pub fn estimate(
        &self,
        problem: &dyn BilevelProblem,
        phi_hat: &Vector,
        theta: &Vector,
        solver: &SolverConfig,
    ) -> Result<HypergradEstimate> {
        match self {
            EstimatorSpec::Oracle => oracle_exact(problem, phi_hat, theta),
            EstimatorSpec::FirstOrder => first_order(problem, phi_hat, theta),
            EstimatorSpec::Identity => one_step_identity(problem, phi_hat, theta),
            &EstimatorSpec::Rbp { alpha, k, tol } => {
                let alpha = alpha.unwrap_or_else(|| default_rbp_rate(problem, phi_hat, theta));
                rbp_neumann(problem, phi_hat, theta, alpha, k, tol)
            }
            &EstimatorSpec::Cg { max_iters, tol } => conjugate_gradient(problem, phi_hat, theta, max_iters, tol),
            &EstimatorSpec::Ep { points, kind, beta, allow_negative_beta, chain } => {
                let stencil = solve_fd_stencil(points, kind)?.with_step(beta)?;
                let cfg = SolverConfig {
                    allow_negative_beta,
                    ..solver.clone()
                };
                ep_estimate_with(problem, theta, phi_hat, &stencil, PhaseSolver::Descent(&cfg), chain)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inner::minimize_inner;
    use crate::linalg::{central_diff_grad, gaussian_vector, rng_from_seed, DenseMat};
    use crate::problems::{QuadraticBilevel, RidgeHyperopt};
    use nalgebra::{dmatrix, dvector};

    fn p1() -> QuadraticBilevel {
        QuadraticBilevel::p1()
    }

    fn two() -> Vector {
        dvector![2.0]
    }

    fn tight() -> SolverConfig {
        SolverConfig::with_tol(1e-14)
    }

    /// Quadratic with a prescribed Hessian and g = ∂φL^out = (1, ..., 1) at φ = 0.
    fn with_hessian(h: DenseMat) -> (QuadraticBilevel, Vector, Vector) {
        let n = h.nrows();
        let q = QuadraticBilevel::new(
            h,
            DenseMat::identity(n, n),
            Vector::zeros(n),
            Vector::from_element(n, -1.0),
            0.0,
        )
        .unwrap();
        (q, Vector::zeros(n), Vector::zeros(n))
    }

    #[test]
    fn oracle_on_p1() {
        let e = oracle_exact(&p1(), &two(), &two()).unwrap();
        assert!((e.grad[0] - 2.0).abs() < 1e-14);
        assert_eq!(e.hvp_count, 1);
    }

    #[test]
    fn oracle_zero_at_outer_optimum() {
        let mut q = QuadraticBilevel::random(1, 6, 3, 0.0);
        let theta = dvector![0.2, 0.4, -0.3];
        let phi = q.inner_solution(&theta).unwrap();
        q.t = phi.clone();
        assert!(oracle_exact(&q, &phi, &theta).unwrap().grad.norm() < 1e-9);
    }

    #[test]
    fn oracle_matches_fd_through_solution() {
        let q = QuadraticBilevel::random(3, 8, 4, 0.1);
        let theta = dvector![0.5, -1.0, 0.25, 0.0];
        let phi = q.inner_solution(&theta).unwrap();
        let e = oracle_exact(&q, &phi, &theta).unwrap();
        let fd = central_diff_grad(|t| q.composite_outer(t).unwrap(), &theta, 1e-5).unwrap();
        assert!((e.grad - fd).norm() <= 1e-6);
        assert_eq!(e.hvp_count, 8);
    }

    #[test]
    fn oracle_rejects_indefinite_hessian() {
        let (q, phi, theta) = with_hessian(dmatrix![1.0, 0.0; 0.0, -1.0]);
        assert!(matches!(oracle_exact(&q, &phi, &theta), Err(Error::NotSpd(_))));
    }

    #[test]
    fn first_order_cases() {
        let e = first_order(&p1(), &two(), &two()).unwrap();
        assert_eq!(e.grad, dvector![0.0]);
        assert_eq!((e.hvp_count, e.inner_solve_count), (0, 0));
        let r = RidgeHyperopt::synthetic(10, 5, 3, 0, false);
        assert_eq!(first_order(&r, &dvector![1.0, 2.0, 3.0], &dvector![0.5]).unwrap().grad, dvector![0.0]);
        let q = QuadraticBilevel::random(0, 4, 2, 0.7);
        let theta = dvector![1.5, -2.0];
        assert_eq!(first_order(&q, &Vector::zeros(4), &theta).unwrap().grad, &theta * 0.7);
    }

    #[test]
    fn identity_cases() {
        let e = one_step_identity(&p1(), &two(), &two()).unwrap();
        assert!((e.grad[0] - 2.0).abs() < 1e-15);

        // ∂φL^out = 0 at φ̂ = t
        let q = QuadraticBilevel::random(2, 5, 2, 0.3);
        let theta = dvector![0.1, 0.2];
        let id = one_step_identity(&q, &q.t, &theta).unwrap();
        assert_eq!(id.grad, first_order(&q, &q.t, &theta).unwrap().grad);

        // H = 2·Id: identity doubles the implicit part
        let (mut q, phi, theta) = with_hessian(DenseMat::identity(3, 3) * 2.0);
        q.gamma = 0.5;
        let theta = theta.add_scalar(1.0);
        let oracle = oracle_exact(&q, &phi, &theta).unwrap().grad;
        let direct = first_order(&q, &phi, &theta).unwrap().grad;
        let id = one_step_identity(&q, &phi, &theta).unwrap().grad;
        let implicit = &oracle - &direct;
        assert!((&id - (&direct + &implicit * 2.0)).norm() < 1e-14);
        assert!((&id - &oracle).norm() > 0.1);
        assert!(((&id - &oracle) - &implicit).norm() < 1e-14);
        // the error relative to the doubled estimate is the oracle implicit part times (1 − 1/2)
        assert!(((&id - &oracle) - (&id - &direct) * 0.5).norm() < 1e-14);
    }

    #[test]
    fn rbp_cases() {
        let e = rbp_neumann(&p1(), &two(), &two(), 1.0, 1, 0.0).unwrap();
        assert_eq!(e.pi.unwrap()[0], 2.0);
        assert_eq!(e.grad[0], 2.0);

        let q = QuadraticBilevel::random(0, 5, 2, 0.4);
        let theta = dvector![0.3, 0.3];
        let phi = Vector::from_element(5, 0.1);
        let zero = rbp_neumann(&q, &phi, &theta, 0.2, 0, 0.0).unwrap();
        assert_eq!(zero.grad, first_order(&q, &phi, &theta).unwrap().grad);
        assert_eq!(zero.hvp_count, 0);

        let (q, phi, theta) = with_hessian(dmatrix![1.0, 0.0; 0.0, 2.0]);
        let (pi, iters, _) = rbp_pi(&q, &phi, &theta, 0.4, 60, 0.0).unwrap();
        assert_eq!(iters, 60);
        assert!((&pi - dvector![1.0, 0.5]).norm() < 1e-9);
        let dense = solve_spd(&q.h, &dvector![1.0, 1.0]).unwrap();
        assert!((pi - dense).norm() < 1e-9);
    }

    #[test]
    fn rbp_diverges_with_large_rate() {
        let (q, phi, theta) = with_hessian(dmatrix![1.0, 0.0; 0.0, 2.0]);
        assert!(matches!(
            rbp_pi(&q, &phi, &theta, 1.5, 10_000, 0.0),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn rbp_matches_explicit_neumann_sums() {
        let q = QuadraticBilevel::random(7, 10, 3, 0.0);
        let theta = dvector![0.1, -0.2, 0.3];
        let phi = Vector::from_element(10, 0.3);
        let alpha = default_rbp_rate(&q, &phi, &theta);
        let g = q.grad_phi_outer(&phi, &theta);
        let m = DenseMat::identity(10, 10) - &q.h * alpha;
        for k in [1usize, 2, 5, 10] {
            let (pi, _, _) = rbp_pi(&q, &phi, &theta, alpha, k, 0.0).unwrap();
            let mut term = g.clone();
            let mut sum = Vector::zeros(10);
            for _ in 0..k {
                sum += &term;
                term = m.transpose() * term;
            }
            assert!((pi - sum * alpha).norm() <= 1e-10, "k = {k}");
        }
    }

    #[test]
    fn truncation_refines_monotonically() {
        let q = QuadraticBilevel::random(5, 6, 2, 0.0);
        let theta = dvector![0.7, -0.4];
        let phi = q.inner_solution(&theta).unwrap();
        let oracle = oracle_exact(&q, &phi, &theta).unwrap().grad;
        let alpha = default_rbp_rate(&q, &phi, &theta);
        let err = |g: Vector| (g - &oracle).norm();
        let e0 = err(first_order(&q, &phi, &theta).unwrap().grad);
        let e1 = err(rbp_neumann(&q, &phi, &theta, alpha, 1, 0.0).unwrap().grad);
        let e10 = err(rbp_neumann(&q, &phi, &theta, alpha, 10, 0.0).unwrap().grad);
        assert!(e0 >= e1 && e1 >= e10, "{e0} {e1} {e10}");
    }

    #[test]
    fn cg_cases() {
        let (q, phi, theta) = with_hessian(DenseMat::identity(4, 4));
        let (pi, iters, _) = cg_pi(&q, &phi, &theta, 10, 1e-12).unwrap();
        assert_eq!(iters, 1);
        assert!((pi - Vector::from_element(4, 1.0)).norm() < 1e-15);

        let e = conjugate_gradient(&p1(), &two(), &two(), 10, 1e-12).unwrap();
        assert_eq!(e.phase2_iters, 1);
        assert!((e.grad[0] - 2.0).abs() < 1e-15);

        let q = QuadraticBilevel::random(5, 12, 3, 0.0);
        let theta = dvector![1.0, 0.0, -1.0];
        let phi = Vector::from_element(12, 0.2);
        let (pi, iters, _) = cg_pi(&q, &phi, &theta, 12, 0.0).unwrap();
        assert_eq!(iters, 12);
        let dense = solve_spd(&q.h, &q.grad_phi_outer(&phi, &theta)).unwrap();
        assert!((pi - dense).norm() <= 1e-8);
    }

    #[test]
    fn cg_detects_indefinite_curvature() {
        let (q, phi, theta) = with_hessian(dmatrix![1.0, 0.0; 0.0, -3.0]);
        assert!(matches!(
            cg_pi(&q, &phi, &theta, 10, 1e-12),
            Err(Error::IndefiniteDetected { .. })
        ));
    }

    #[test]
    fn assemble_cases() {
        let q = QuadraticBilevel::random(8, 5, 3, 0.2);
        let theta = dvector![0.3, 0.1, -0.5];
        let phi = Vector::from_element(5, -0.2);
        let zero = assemble_gradient(&q, &phi, &theta, &PiVector(Vector::zeros(5))).unwrap();
        assert_eq!(zero, first_order(&q, &phi, &theta).unwrap().grad);
        let dense = solve_spd(&q.h, &q.grad_phi_outer(&phi, &theta)).unwrap();
        let assembled = assemble_gradient(&q, &phi, &theta, &PiVector(dense)).unwrap();
        assert!((assembled - oracle_exact(&q, &phi, &theta).unwrap().grad).norm() <= 1e-10);
        assert_eq!(assemble_gradient(&p1(), &two(), &two(), &PiVector(two())).unwrap(), two());
        assert!(matches!(
            assemble_gradient(&q, &phi, &theta, &PiVector(Vector::zeros(4))),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn ep_two_point_on_p1() {
        let s = solve_fd_stencil(2, StencilKind::Forward).unwrap().with_step(0.1).unwrap();
        let e = ep_estimate(&p1(), &dvector![1.0], &dvector![1.0], &s, &tight()).unwrap();
        assert!((e.grad[0] - 1.0 / 1.1).abs() < 1e-12);
        assert_eq!((e.inner_solve_count, e.hvp_count), (1, 0));
    }

    #[test]
    fn ep_symmetric_on_p1() {
        let s = solve_fd_stencil(3, StencilKind::Symmetric).unwrap().with_step(0.1).unwrap();
        let err = ep_estimate(&p1(), &dvector![1.0], &dvector![1.0], &s, &tight());
        assert_eq!(err, Err(Error::NegativeBetaNotEnabled(-0.1)));
        let cfg = SolverConfig { allow_negative_beta: true, ..tight() };
        let e = ep_estimate(&p1(), &dvector![1.0], &dvector![1.0], &s, &cfg).unwrap();
        assert!((e.grad[0] - 1.0 / (1.0 - 0.01)).abs() < 1e-12);
        assert_eq!(e.inner_solve_count, 2);
    }

    #[test]
    fn ep_null_outer_loss_gives_zero() {
        // zero validation data makes L^out identically zero
        let mut r = RidgeHyperopt::synthetic(10, 5, 3, 2, false);
        r.x_val.fill(0.0);
        r.y_val.fill(0.0);
        let theta = dvector![-0.5];
        let phi0 = minimize_inner(&r, &theta, &Vector::zeros(3), &tight()).unwrap().phi_hat;
        for p in 2..=4 {
            let s = solve_fd_stencil(p, StencilKind::Forward).unwrap().with_step(0.05).unwrap();
            let e = ep_estimate(&r, &theta, &phi0, &s, &tight()).unwrap();
            assert!(e.grad.norm() < 1e-12, "p = {p}: {}", e.grad);
        }
    }

    #[test]
    fn ep_phase_failure_is_wrapped() {
        let (q, phi, theta) = with_hessian(dmatrix![1.0]);
        let s = solve_fd_stencil(2, StencilKind::Forward).unwrap().with_step(0.1).unwrap();
        let cfg = SolverConfig { step_size: Some(10.0), ..SolverConfig::default() };
        assert!(matches!(
            ep_estimate(&q, &theta, &phi, &s, &cfg),
            Err(Error::PhaseDiverged { .. })
        ));
    }

    #[test]
    fn ep_pi_recovery_on_p1() {
        let theta = dvector![1.0];
        let phi0 = dvector![1.0];
        let phib = minimize_augmented(&p1(), &theta, 0.01, &phi0, &tight()).unwrap().phi_hat;
        let pi = ep_pi_recover(&phi0, &phib, 0.01).unwrap();
        assert!((pi.0[0] - (1.0 - 1.0 / 1.01) / 0.01).abs() < 1e-9);
        assert!((pi.0[0] - 0.990099).abs() < 1e-6);
        let (cg, _, _) = cg_pi(&p1(), &phi0, &theta, 5, 1e-14).unwrap();
        assert!((cg[0] - 1.0).abs() < 1e-14);
        assert!(((cg[0] - pi.0[0]) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn ep_pi_recovery_shrinks_with_beta() {
        let q = QuadraticBilevel::random(0, 10, 4, 0.0);
        let theta = Vector::from_element(4, 0.5);
        let phi0 = q.inner_solution(&theta).unwrap();
        let (cg, _, _) = cg_pi(&q, &phi0, &theta, 100, 1e-15).unwrap();
        let gap = |beta: f64| {
            let phib = solve_exact(&q, &theta, beta, &phi0).unwrap().phi_hat;
            (ep_pi_recover(&phi0, &phib, beta).unwrap().0 - &cg).norm()
        };
        let ratio = gap(1e-2) / gap(1e-3);
        assert!((7.0..14.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn ep_pi_zero_when_outer_null() {
        let phi = dvector![0.3, -0.1];
        assert_eq!(ep_pi_recover(&phi, &phi, 0.1).unwrap().0, Vector::zeros(2));
    }

    #[test]
    fn estimators_agree_with_oracle_on_random_instances() {
        let mut rng = rng_from_seed(0);
        for seed in 0..5 {
            let q = QuadraticBilevel::random(seed, 12, 4, 0.1);
            let theta = gaussian_vector(4, &mut rng);
            let phi = minimize_inner(&q, &theta, &Vector::zeros(12), &SolverConfig::with_tol(1e-12))
                .unwrap()
                .phi_hat;
            let oracle = oracle_exact(&q, &phi, &theta).unwrap().grad;
            let cg = conjugate_gradient(&q, &phi, &theta, 100, 1e-12).unwrap();
            assert!((cg.grad - &oracle).norm() <= 1e-7);
            let alpha = default_rbp_rate(&q, &phi, &theta);
            let rbp = rbp_neumann(&q, &phi, &theta, alpha, 5000, 0.0).unwrap();
            assert!((rbp.grad - &oracle).norm() <= 1e-7);
            assert_eq!(rbp.hvp_count, rbp.phase2_iters);
            let s = solve_fd_stencil(2, StencilKind::Forward).unwrap().with_step(1e-4).unwrap();
            let ep = ep_estimate(&q, &theta, &phi, &s, &SolverConfig::with_tol(1e-12)).unwrap();
            assert!((ep.grad - &oracle).norm() <= 1e-3);
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let s: EstimatorSpec = serde_json::from_str(r#"{"method": "ep", "points": 3, "beta": 0.01}"#).unwrap();
        assert_eq!(
            s,
            EstimatorSpec::Ep { points: 3, kind: StencilKind::Forward, beta: 0.01, allow_negative_beta: false, chain: true }
        );
        let back: EstimatorSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<EstimatorSpec>(r#"{"method": "cg", "bogus": 1}"#).is_err());
    }
}
