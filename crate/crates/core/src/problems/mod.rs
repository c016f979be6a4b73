//! The bilevel problem interface and the built-in problem suite.
//!
//! A problem is a bundle of deterministic callbacks: the inner and outer
//! losses, their first derivatives in φ and θ, and two second-order actions
//! of the inner loss (Hessian-vector product in φ and the mixed θ-φ
//! vector-Jacobian product). No estimator ever needs a materialized matrix.

mod meta;
mod pcn;
mod quadratic;
mod ridge;
pub mod spec;

pub use meta::{MetaRidge, MetaTask};
pub use pcn::PredictiveCodingNet;
pub use quadratic::QuadraticBilevel;
pub use ridge::RidgeHyperopt;
pub use spec::{ProblemInstance, ProblemSpec};

use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{central_diff_grad, central_diff_jvp, random_unit_vector, rng_from_seed, Vector};

pub trait BilevelProblem: Send + Sync {
    /// `(|φ|, |θ|)`
    fn dims(&self) -> (usize, usize);

    fn inner_loss(&self, phi: &Vector, theta: &Vector) -> f64;
    fn outer_loss(&self, phi: &Vector, theta: &Vector) -> f64;

    fn grad_phi_inner(&self, phi: &Vector, theta: &Vector) -> Vector;
    fn grad_theta_inner(&self, phi: &Vector, theta: &Vector) -> Vector;
    fn grad_phi_outer(&self, phi: &Vector, theta: &Vector) -> Vector;
    fn grad_theta_outer(&self, phi: &Vector, theta: &Vector) -> Vector;

    /// `∂²φ L^in · v`
    fn hvp_inner(&self, phi: &Vector, theta: &Vector, v: &Vector) -> Vector;

    /// `vᵀ · ∂θ∂φ L^in`, a vector of length `|θ|`.
    fn cross_vjp_inner(&self, phi: &Vector, theta: &Vector, v: &Vector) -> Vector;

    /// `∂²φ L^out · v`. Only used to pick step sizes and for exact nudged
    /// phases; the default is a central difference of `grad_phi_outer`.
    fn hvp_outer(&self, phi: &Vector, theta: &Vector, v: &Vector) -> Vector {
        let h = 1e-6;
        (self.grad_phi_outer(&(phi + v * h), theta) - self.grad_phi_outer(&(phi - v * h), theta))
            / (2.0 * h)
    }

    /// A reasonable starting θ for training runs.
    fn initial_theta(&self) -> Vector {
        Vector::zeros(self.dims().1)
    }

    fn name(&self) -> &'static str;
}

pub(crate) fn check_point(problem: &dyn BilevelProblem, phi: &Vector, theta: &Vector) -> Result<()> {
    let (np, nt) = problem.dims();
    check_dim(np, phi.len())?;
    check_dim(nt, theta.len())
}

/// Worst relative error of each analytic derivative against finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub grad_phi_inner: f64,
    pub grad_theta_inner: f64,
    pub grad_phi_outer: f64,
    pub grad_theta_outer: f64,
    pub hvp_inner: f64,
    pub cross_vjp_inner: f64,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        [
            self.grad_phi_inner,
            self.grad_theta_inner,
            self.grad_phi_outer,
            self.grad_theta_outer,
            self.hvp_inner,
            self.cross_vjp_inner,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-6)`; zero when both vanish.
pub fn relative_error(analytic: &Vector, numeric: &Vector) -> f64 {
    let diff = (analytic - numeric).norm();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.norm().max(numeric.norm()).max(1e-6)
}

/// Directions probed for the second-order checks.
const CHECK_DIRECTIONS: usize = 3;

pub fn check_gradients(
    problem: &dyn BilevelProblem,
    phi: &Vector,
    theta: &Vector,
    h: f64,
) -> Result<GradCheckReport> {
    check_point(problem, phi, theta)?;
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step h must be > 0, got {h}")));
    }
    let fd_phi_in = central_diff_grad(|p| problem.inner_loss(p, theta), phi, h)?;
    let fd_theta_in = central_diff_grad(|t| problem.inner_loss(phi, t), theta, h)?;
    let fd_phi_out = central_diff_grad(|p| problem.outer_loss(p, theta), phi, h)?;
    let fd_theta_out = central_diff_grad(|t| problem.outer_loss(phi, t), theta, h)?;

    let mut report = GradCheckReport {
        grad_phi_inner: relative_error(&problem.grad_phi_inner(phi, theta), &fd_phi_in),
        grad_theta_inner: relative_error(&problem.grad_theta_inner(phi, theta), &fd_theta_in),
        grad_phi_outer: relative_error(&problem.grad_phi_outer(phi, theta), &fd_phi_out),
        grad_theta_outer: relative_error(&problem.grad_theta_outer(phi, theta), &fd_theta_out),
        hvp_inner: 0.0,
        cross_vjp_inner: 0.0,
    };

    let (np, _) = problem.dims();
    if np > 0 {
        let mut rng = rng_from_seed(0);
        for _ in 0..CHECK_DIRECTIONS {
            let v = random_unit_vector(np, &mut rng);
            let fd_hv = central_diff_jvp(|p| problem.grad_phi_inner(p, theta), phi, &v, h)?;
            report.hvp_inner = report
                .hvp_inner
                .max(relative_error(&problem.hvp_inner(phi, theta, &v), &fd_hv));
            let fd_cross =
                central_diff_grad(|t| v.dot(&problem.grad_phi_inner(phi, t)), theta, h)?;
            report.cross_vjp_inner = report.cross_vjp_inner.max(relative_error(
                &problem.cross_vjp_inner(phi, theta, &v),
                &fd_cross,
            ));
        }
    }
    let all = [
        report.grad_phi_inner,
        report.grad_theta_inner,
        report.grad_phi_outer,
        report.grad_theta_outer,
        report.hvp_inner,
        report.cross_vjp_inner,
    ];
    if all.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteEval);
    }
    Ok(report)
}

/// Lipschitz constant of `∇φ L^in` at `φ` via power iteration on the Hessian.
pub fn inner_smoothness(problem: &dyn BilevelProblem, phi: &Vector, theta: &Vector, iters: usize) -> f64 {
    crate::linalg::power_iteration(|v| problem.hvp_inner(phi, theta, v), problem.dims().0, iters, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_vector, rng_from_seed};

    fn all_problems() -> Vec<(Box<dyn BilevelProblem>, u64)> {
        let meta = MetaRidge::new(4, 12, 8, 3, 0.3, 0.1);
        vec![
            (Box::new(QuadraticBilevel::p1()) as Box<dyn BilevelProblem>, 1),
            (Box::new(QuadraticBilevel::random(0, 5, 3, 0.5)), 2),
            (Box::new(RidgeHyperopt::synthetic(30, 20, 5, 0, false)), 3),
            (Box::new(RidgeHyperopt::synthetic(30, 20, 5, 1, true)), 4),
            (Box::new(meta.sample_task(7)), 5),
            (Box::new(PredictiveCodingNet::random(&[2, 3, 1], 1)), 6),
        ]
    }

    #[test]
    fn hvp_symmetry_on_suite() {
        for (p, seed) in all_problems() {
            let (np, nt) = p.dims();
            let mut rng = rng_from_seed(seed);
            for _ in 0..10 {
                let phi = gaussian_vector(np, &mut rng) * 0.5;
                let theta = gaussian_vector(nt, &mut rng) * 0.5;
                let u = gaussian_vector(np, &mut rng);
                let v = gaussian_vector(np, &mut rng);
                let a = u.dot(&p.hvp_inner(&phi, &theta, &v));
                let b = v.dot(&p.hvp_inner(&phi, &theta, &u));
                assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()), "{}: {a} vs {b}", p.name());
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_suite() {
        for (p, seed) in all_problems() {
            let (np, nt) = p.dims();
            let mut rng = rng_from_seed(seed + 100);
            for _ in 0..3 {
                let phi = gaussian_vector(np, &mut rng) * 0.5;
                let theta = gaussian_vector(nt, &mut rng) * 0.5;
                let r = check_gradients(p.as_ref(), &phi, &theta, 1e-5).unwrap();
                assert!(r.max() <= 1e-5, "{}: {r:?}", p.name());
            }
        }
    }

    #[test]
    fn quadratic_check_tight() {
        let q = QuadraticBilevel::random(0, 5, 3, 0.0);
        let mut rng = rng_from_seed(42);
        let phi = gaussian_vector(5, &mut rng);
        let theta = gaussian_vector(3, &mut rng);
        let r = check_gradients(&q, &phi, &theta, 1e-5).unwrap();
        assert!(r.max() <= 1e-6, "{r:?}");
    }

    #[test]
    fn zero_problem_has_zero_error() {
        let p = RidgeHyperopt::zero(6, 4, 3);
        let r = check_gradients(&p, &Vector::zeros(3), &Vector::zeros(1), 1e-5).unwrap();
        assert_eq!(r.max(), 0.0);
        assert_eq!(p.grad_phi_inner(&Vector::zeros(3), &Vector::zeros(1)), Vector::zeros(3));
        assert_eq!(p.grad_theta_inner(&Vector::zeros(3), &Vector::zeros(1)), Vector::zeros(1));
    }

    #[test]
    fn check_rejects_bad_dims() {
        let q = QuadraticBilevel::p1();
        assert!(matches!(
            check_gradients(&q, &Vector::zeros(2), &Vector::zeros(1), 1e-5),
            Err(Error::DimMismatch { .. })
        ));
    }
}
