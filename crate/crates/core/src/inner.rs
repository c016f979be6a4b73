//! First-phase and nudged-phase minimization.
//!
//! Both phases run plain gradient descent (optionally with heavy-ball
//! momentum) on `𝓛(φ, θ, β) = L^in + β·L^out` and stop on the gradient norm.
//! A gradient-norm tolerance converts to a distance bound through strong
//! convexity: `‖φ̂ − φ*‖ ≤ ‖∇φ𝓛(φ̂)‖ / μ` (see [`distance_bound`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, power_iteration, solve_spd, materialize, Vector};
use crate::problems::{check_point, BilevelProblem};

/// Power iterations used to pick the default step size.
pub const STEP_POWER_ITERS: usize = 30;

/// Gradient norms above this are treated as divergence.
pub const DIVERGENCE_NORM: f64 = 1e100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Gd,
    HeavyBall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: SolverMethod,
    /// `None` picks `1/L`, with `L` from power iteration on the Hessian at φ₀.
    pub step_size: Option<f64>,
    /// Heavy-ball momentum in `[0, 1)`. Ignored by `gd`.
    pub momentum: f64,
    pub grad_tol: f64,
    pub max_iters: usize,
    pub record_trace: bool,
    /// Permit β < 0 in nudged phases. Those phases can be unbounded below.
    pub allow_negative_beta: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::Gd,
            step_size: None,
            momentum: 0.5,
            grad_tol: 1e-10,
            max_iters: 100_000,
            record_trace: false,
            allow_negative_beta: false,
        }
    }
}

impl SolverConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            grad_tol: tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) {
            return Err(Error::Config(format!("grad_tol must be > 0, got {}", self.grad_tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if let Some(lr) = self.step_size {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("step_size must be > 0, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerSolveReport {
    #[serde(with = "crate::linalg::serde_vector")]
    pub phi_hat: Vector,
    pub iters: usize,
    pub final_grad_norm: f64,
    pub converged: bool,
    pub step_size: f64,
    pub loss_trace: Option<Vec<f64>>,
}

/// `‖φ̂ − φ*‖ ≤ ‖∇φ L(φ̂)‖ / μ` for a μ-strongly convex loss.
pub fn distance_bound(report: &InnerSolveReport, mu: f64) -> f64 {
    report.final_grad_norm / mu
}

pub fn minimize_inner(
    problem: &dyn BilevelProblem,
    theta: &Vector,
    phi0: &Vector,
    cfg: &SolverConfig,
) -> Result<InnerSolveReport> {
    descend(problem, theta, 0.0, phi0, cfg)
}

pub fn minimize_augmented(
    problem: &dyn BilevelProblem,
    theta: &Vector,
    beta: f64,
    phi0: &Vector,
    cfg: &SolverConfig,
) -> Result<InnerSolveReport> {
    if !beta.is_finite() {
        return Err(Error::NonFinite("beta"));
    }
    if beta < 0.0 && !cfg.allow_negative_beta {
        return Err(Error::NegativeBetaNotEnabled(beta));
    }
    descend(problem, theta, beta, phi0, cfg)
}

pub fn augmented_loss(problem: &dyn BilevelProblem, phi: &Vector, theta: &Vector, beta: f64) -> f64 {
    let inner = problem.inner_loss(phi, theta);
    if beta == 0.0 {
        inner
    } else {
        inner + beta * problem.outer_loss(phi, theta)
    }
}

pub fn augmented_grad(problem: &dyn BilevelProblem, phi: &Vector, theta: &Vector, beta: f64) -> Vector {
    let g = problem.grad_phi_inner(phi, theta);
    if beta == 0.0 {
        g
    } else {
        g + problem.grad_phi_outer(phi, theta) * beta
    }
}

pub fn augmented_hvp(
    problem: &dyn BilevelProblem,
    phi: &Vector,
    theta: &Vector,
    beta: f64,
    v: &Vector,
) -> Vector {
    let hv = problem.hvp_inner(phi, theta, v);
    if beta == 0.0 {
        hv
    } else {
        hv + problem.hvp_outer(phi, theta, v) * beta
    }
}

/// Default step `1/L` for the augmented loss at `phi`.
pub fn default_step_size(problem: &dyn BilevelProblem, theta: &Vector, beta: f64, phi: &Vector) -> f64 {
    let n = problem.dims().0;
    let l = power_iteration(
        |v| augmented_hvp(problem, phi, theta, beta, v),
        n,
        STEP_POWER_ITERS,
        0,
    )
    .abs();
    if l > 0.0 && l.is_finite() {
        1.0 / l
    } else {
        1.0
    }
}

fn descend(
    problem: &dyn BilevelProblem,
    theta: &Vector,
    beta: f64,
    phi0: &Vector,
    cfg: &SolverConfig,
) -> Result<InnerSolveReport> {
    check_point(problem, phi0, theta)?;
    cfg.validate()?;
    if !all_finite(phi0) {
        return Err(Error::NonFinite("initial phi"));
    }
    let lr = cfg
        .step_size
        .unwrap_or_else(|| default_step_size(problem, theta, beta, phi0));
    let momentum = match cfg.method {
        SolverMethod::Gd => 0.0,
        SolverMethod::HeavyBall => cfg.momentum,
    };

    let mut phi = phi0.clone();
    let mut velocity = Vector::zeros(phi.len());
    let mut trace = cfg.record_trace.then(Vec::new);
    let mut iters = 0;
    loop {
        let grad = augmented_grad(problem, &phi, theta, beta);
        let norm = grad.norm();
        if let Some(t) = trace.as_mut() {
            t.push(augmented_loss(problem, &phi, theta, beta));
        }
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Err(Error::Diverged { iters });
        }
        if norm <= cfg.grad_tol || iters == cfg.max_iters {
            if trace.as_ref().is_some_and(|t| t.iter().any(|x| !x.is_finite())) {
                return Err(Error::Diverged { iters });
            }
            return Ok(InnerSolveReport {
                phi_hat: phi,
                iters,
                final_grad_norm: norm,
                converged: norm <= cfg.grad_tol,
                step_size: lr,
                loss_trace: trace,
            });
        }
        if momentum > 0.0 {
            velocity = velocity * momentum - grad * lr;
            phi += &velocity;
        } else {
            phi.axpy(-lr, &grad, 1.0);
        }
        iters += 1;
    }
}

/// Minimize to machine precision: a gradient-descent warm start followed by
/// dense Newton steps on `𝓛(·, θ, β)`. Only for desk-scale experiments that
/// need "exact" phases.
pub fn solve_exact(
    problem: &dyn BilevelProblem,
    theta: &Vector,
    beta: f64,
    phi0: &Vector,
) -> Result<InnerSolveReport> {
    let warm = SolverConfig {
        grad_tol: 1e-8,
        allow_negative_beta: true,
        ..SolverConfig::default()
    };
    let mut rep = minimize_augmented(problem, theta, beta, phi0, &warm)?;
    let n = problem.dims().0;
    let mut phi = rep.phi_hat.clone();
    let mut best = rep.final_grad_norm;
    for _ in 0..8 {
        let h = materialize(|v| augmented_hvp(problem, &phi, theta, beta, v), n)?;
        let h = (&h + h.transpose()) * 0.5;
        let g = augmented_grad(problem, &phi, theta, beta);
        let step = solve_spd(&h, &g)?;
        let next = &phi - step;
        let norm = augmented_grad(problem, &next, theta, beta).norm();
        if !(norm < best) {
            break;
        }
        phi = next;
        best = norm;
        rep.iters += 1;
    }
    rep.phi_hat = phi;
    rep.final_grad_norm = best;
    rep.converged = true;
    Ok(rep)
}
