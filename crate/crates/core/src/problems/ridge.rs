use super::BilevelProblem;
use crate::linalg::{gaussian_matrix, gaussian_vector, rng_from_seed, DenseMat, Vector};

/// Noise level of the planted regression targets.
pub const TARGET_NOISE: f64 = 0.1;

/// Ridge regression with the regularization strength as a hyperparameter.
///
/// `L^in = ½‖X φ − y‖²/m + ½ Σⱼ exp(θⱼ) φⱼ²`, `L^out = ½‖X_val φ − y_val‖²/m_val`.
/// With `per_coordinate` false θ is the single scalar `log λ`; otherwise
/// there is one log-strength per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeHyperopt {
    pub x_train: DenseMat,
    pub y_train: Vector,
    pub x_val: DenseMat,
    pub y_val: Vector,
    pub per_coordinate: bool,
}

impl RidgeHyperopt {
    /// Gaussian design with target `z/2 + sin(3z) + N(0, 0.1²)`, `z = x·w` and
    /// `w ~ N(0, I/d)`. The sinusoid is not linearly representable, which
    /// gives the validation loss an interior optimum in λ.
    pub fn synthetic(
        n_train: usize,
        n_val: usize,
        n_features: usize,
        seed: u64,
        per_coordinate: bool,
    ) -> Self {
        let mut rng = rng_from_seed(seed);
        let w = gaussian_vector(n_features, &mut rng) / (n_features as f64).sqrt();
        let x = gaussian_matrix(n_train + n_val, n_features, &mut rng);
        let noise = gaussian_vector(n_train + n_val, &mut rng) * TARGET_NOISE;
        let z = &x * &w;
        let y = z.map(|v| 0.5 * v + (3.0 * v).sin()) + noise;
        Self {
            x_train: x.rows(0, n_train).into_owned(),
            y_train: y.rows(0, n_train).into_owned(),
            x_val: x.rows(n_train, n_val).into_owned(),
            y_val: y.rows(n_train, n_val).into_owned(),
            per_coordinate,
        }
    }

    /// All-zero data.
    pub fn zero(n_train: usize, n_val: usize, n_features: usize) -> Self {
        Self {
            x_train: DenseMat::zeros(n_train, n_features),
            y_train: Vector::zeros(n_train),
            x_val: DenseMat::zeros(n_val, n_features),
            y_val: Vector::zeros(n_val),
            per_coordinate: false,
        }
    }

    pub fn n_features(&self) -> usize {
        self.x_train.ncols()
    }

    /// Per-feature regularization strengths `exp(θ)`.
    pub fn strengths(&self, theta: &Vector) -> Vector {
        if self.per_coordinate {
            theta.map(f64::exp)
        } else {
            Vector::from_element(self.n_features(), theta[0].exp())
        }
    }

    pub fn validation_loss(&self, phi: &Vector) -> f64 {
        0.5 * (&self.x_val * phi - &self.y_val).norm_squared() / self.x_val.nrows().max(1) as f64
    }

    /// Closed-form inner solution, used as an oracle in tests and grid searches.
    pub fn solve_inner_exact(&self, theta: &Vector) -> crate::error::Result<Vector> {
        let m = self.x_train.nrows().max(1) as f64;
        let a = self.x_train.transpose() * &self.x_train / m
            + DenseMat::from_diagonal(&self.strengths(theta));
        let a = (&a + a.transpose()) * 0.5;
        crate::linalg::solve_spd(&a, &(self.x_train.transpose() * &self.y_train / m))
    }

    fn m(&self) -> f64 {
        self.x_train.nrows().max(1) as f64
    }
}

impl BilevelProblem for RidgeHyperopt {
    fn dims(&self) -> (usize, usize) {
        let d = self.n_features();
        (d, if self.per_coordinate { d } else { 1 })
    }

    fn inner_loss(&self, phi: &Vector, theta: &Vector) -> f64 {
        let fit = 0.5 * (&self.x_train * phi - &self.y_train).norm_squared() / self.m();
        fit + 0.5 * self.strengths(theta).dot(&phi.component_mul(phi))
    }

    fn outer_loss(&self, phi: &Vector, _theta: &Vector) -> f64 {
        self.validation_loss(phi)
    }

    fn grad_phi_inner(&self, phi: &Vector, theta: &Vector) -> Vector {
        self.x_train.transpose() * (&self.x_train * phi - &self.y_train) / self.m()
            + self.strengths(theta).component_mul(phi)
    }

    fn grad_theta_inner(&self, phi: &Vector, theta: &Vector) -> Vector {
        let per = self.strengths(theta).component_mul(&phi.component_mul(phi)) * 0.5;
        if self.per_coordinate {
            per
        } else {
            Vector::from_element(1, per.sum())
        }
    }

    fn grad_phi_outer(&self, phi: &Vector, _theta: &Vector) -> Vector {
        self.x_val.transpose() * (&self.x_val * phi - &self.y_val) / self.x_val.nrows().max(1) as f64
    }

    fn grad_theta_outer(&self, _phi: &Vector, theta: &Vector) -> Vector {
        Vector::zeros(theta.len())
    }

    fn hvp_inner(&self, _phi: &Vector, theta: &Vector, v: &Vector) -> Vector {
        self.x_train.transpose() * (&self.x_train * v) / self.m() + self.strengths(theta).component_mul(v)
    }

    fn cross_vjp_inner(&self, phi: &Vector, theta: &Vector, v: &Vector) -> Vector {
        let per = self.strengths(theta).component_mul(&phi.component_mul(v));
        if self.per_coordinate {
            per
        } else {
            Vector::from_element(1, per.sum())
        }
    }

    fn hvp_outer(&self, _phi: &Vector, _theta: &Vector, v: &Vector) -> Vector {
        self.x_val.transpose() * (&self.x_val * v) / self.x_val.nrows().max(1) as f64
    }

    fn name(&self) -> &'static str {
        "ridge"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::extremal_ritz_values;

    #[test]
    fn exact_solution_zeroes_gradient() {
        let r = RidgeHyperopt::synthetic(60, 40, 10, 0, false);
        let theta = Vector::from_element(1, -2.0);
        let phi = r.solve_inner_exact(&theta).unwrap();
        assert!(r.grad_phi_inner(&phi, &theta).norm() < 1e-12);
    }

    #[test]
    fn strong_convexity_from_ritz_values() {
        for per in [false, true] {
            let r = RidgeHyperopt::synthetic(20, 10, 6, 3, per);
            let mut rng = rng_from_seed(9);
            for _ in 0..5 {
                let theta = gaussian_vector(r.dims().1, &mut rng);
                let phi = gaussian_vector(6, &mut rng);
                let (lo, _) = extremal_ritz_values(|v| r.hvp_inner(&phi, &theta, v), 6, 50, 1);
                let floor = theta.iter().cloned().fold(f64::INFINITY, f64::min).exp();
                assert!(lo >= floor - 1e-8, "{lo} < {floor}");
            }
        }
    }

    #[test]
    fn outer_has_no_direct_theta_dependency() {
        let r = RidgeHyperopt::synthetic(10, 5, 3, 1, true);
        let g = r.grad_theta_outer(&Vector::from_element(3, 1.0), &Vector::from_element(3, 0.2));
        assert_eq!(g, Vector::zeros(3));
    }
}
