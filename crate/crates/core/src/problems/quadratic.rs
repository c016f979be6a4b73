use nalgebra::dvector;

use super::BilevelProblem;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{gaussian_matrix, gaussian_vector, rng_from_seed, solve_spd, DenseMat, Vector};

/// `L^in = ½φᵀHφ − φᵀ(Bθ + c)`, `L^out = ½‖φ − t‖² + (γ/2)‖θ‖²`.
///
/// The inner minimizer is `φ*θ = H⁻¹(Bθ + c)` and the cross derivative
/// `∂θ∂φ L^in` is the constant `−B`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticBilevel {
    pub h: DenseMat,
    pub b: DenseMat,
    pub c: Vector,
    pub t: Vector,
    pub gamma: f64,
}

impl QuadraticBilevel {
    pub fn new(h: DenseMat, b: DenseMat, c: Vector, t: Vector, gamma: f64) -> Result<Self> {
        let n = h.nrows();
        check_dim(n, h.ncols())?;
        check_dim(n, b.nrows())?;
        check_dim(n, c.len())?;
        check_dim(n, t.len())?;
        if !(gamma >= 0.0) {
            return Err(Error::InvalidParameter(format!("gamma must be >= 0, got {gamma}")));
        }
        Ok(Self { h, b, c, t, gamma })
    }

    /// The one-dimensional instance `L^in = ½(φ − θ)²`, `L^out = ½φ²`.
    pub fn p1() -> Self {
        Self {
            h: DenseMat::identity(1, 1),
            b: DenseMat::identity(1, 1),
            c: dvector![0.0],
            t: dvector![0.0],
            gamma: 0.0,
        }
    }

    /// Seeded random instance with `H = I + MᵀM/n`, so the spectrum of `H`
    /// sits in roughly `[1, 5]`.
    pub fn random(seed: u64, n_phi: usize, n_theta: usize, gamma: f64) -> Self {
        let mut rng = rng_from_seed(seed);
        let m = gaussian_matrix(n_phi, n_phi, &mut rng);
        let mut h = DenseMat::identity(n_phi, n_phi) + m.transpose() * &m / n_phi as f64;
        h = (&h + h.transpose()) * 0.5;
        let b = gaussian_matrix(n_phi, n_theta, &mut rng) / (n_theta as f64).sqrt();
        let c = gaussian_vector(n_phi, &mut rng);
        let t = gaussian_vector(n_phi, &mut rng);
        Self { h, b, c, t, gamma }
    }

    pub fn inner_solution(&self, theta: &Vector) -> Result<Vector> {
        check_dim(self.b.ncols(), theta.len())?;
        solve_spd(&self.h, &(&self.b * theta + &self.c))
    }

    /// Exact `(φ*θ, ∇θ)`.
    pub fn closed_form_solution(&self, theta: &Vector) -> Result<(Vector, Vector)> {
        let phi = self.inner_solution(theta)?;
        let pi = solve_spd(&self.h, &(&phi - &self.t))?;
        // ∇θ = ∂θL^out − πᵀ(−B)
        let grad = theta * self.gamma + self.b.transpose() * pi;
        Ok((phi, grad))
    }

    /// `θ ↦ L^out(φ*θ, θ)`.
    pub fn composite_outer(&self, theta: &Vector) -> Result<f64> {
        let phi = self.inner_solution(theta)?;
        Ok(self.outer_loss(&phi, theta))
    }
}

impl BilevelProblem for QuadraticBilevel {
    fn dims(&self) -> (usize, usize) {
        (self.h.nrows(), self.b.ncols())
    }

    fn inner_loss(&self, phi: &Vector, theta: &Vector) -> f64 {
        0.5 * phi.dot(&(&self.h * phi)) - phi.dot(&(&self.b * theta + &self.c))
    }

    fn outer_loss(&self, phi: &Vector, theta: &Vector) -> f64 {
        0.5 * (phi - &self.t).norm_squared() + 0.5 * self.gamma * theta.norm_squared()
    }

    fn grad_phi_inner(&self, phi: &Vector, theta: &Vector) -> Vector {
        &self.h * phi - &self.b * theta - &self.c
    }

    fn grad_theta_inner(&self, phi: &Vector, _theta: &Vector) -> Vector {
        -(self.b.transpose() * phi)
    }

    fn grad_phi_outer(&self, phi: &Vector, _theta: &Vector) -> Vector {
        phi - &self.t
    }

    fn grad_theta_outer(&self, _phi: &Vector, theta: &Vector) -> Vector {
        theta * self.gamma
    }

    fn hvp_inner(&self, _phi: &Vector, _theta: &Vector, v: &Vector) -> Vector {
        &self.h * v
    }

    fn cross_vjp_inner(&self, _phi: &Vector, _theta: &Vector, v: &Vector) -> Vector {
        -(self.b.transpose() * v)
    }

    fn hvp_outer(&self, _phi: &Vector, _theta: &Vector, v: &Vector) -> Vector {
        v.clone()
    }

    fn initial_theta(&self) -> Vector {
        Vector::from_element(self.b.ncols(), 1.0)
    }

    fn name(&self) -> &'static str {
        "quad"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::central_diff_grad;

    #[test]
    fn p1_closed_form() {
        let (phi, grad) = QuadraticBilevel::p1().closed_form_solution(&dvector![2.0]).unwrap();
        assert!((phi[0] - 2.0).abs() < 1e-15);
        assert!((grad[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn target_at_solution_gives_zero_gradient() {
        let mut q = QuadraticBilevel::random(4, 6, 3, 0.0);
        let theta = dvector![0.3, -1.0, 0.7];
        q.t = q.inner_solution(&theta).unwrap();
        let (_, grad) = q.closed_form_solution(&theta).unwrap();
        assert!(grad.norm() < 1e-12);
    }

    #[test]
    fn closed_form_matches_fd_through_solution() {
        let q = QuadraticBilevel::random(0, 5, 3, 0.2);
        let theta = dvector![0.5, -0.25, 1.0];
        let (_, grad) = q.closed_form_solution(&theta).unwrap();
        let fd = central_diff_grad(|t| q.composite_outer(t).unwrap(), &theta, 1e-5).unwrap();
        assert!((grad - fd).norm() <= 1e-6);
    }

    #[test]
    fn inner_gradient_vanishes_at_solution() {
        let q = QuadraticBilevel::random(0, 10, 4, 0.0);
        let theta = Vector::from_element(4, 0.5);
        let phi = q.inner_solution(&theta).unwrap();
        assert!(q.grad_phi_inner(&phi, &theta).norm() <= 1e-10);
    }

    #[test]
    fn indefinite_h_is_reported() {
        let mut q = QuadraticBilevel::p1();
        q.h[(0, 0)] = -1.0;
        assert!(matches!(q.closed_form_solution(&dvector![1.0]), Err(Error::NotSpd(_))));
    }

    #[test]
    fn random_is_deterministic() {
        assert_eq!(QuadraticBilevel::random(3, 4, 2, 0.1), QuadraticBilevel::random(3, 4, 2, 0.1));
        assert_ne!(QuadraticBilevel::random(3, 4, 2, 0.1), QuadraticBilevel::random(4, 4, 2, 0.1));
    }
}
