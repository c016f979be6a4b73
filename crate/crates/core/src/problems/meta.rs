use super::BilevelProblem;
use crate::linalg::{derive_seed, gaussian_matrix, gaussian_vector, rng_from_seed, DenseMat, Vector};

/// Meta-learning a ridge regularizer: strength and center are shared across tasks.
///
/// θ = `(log λ, w₀)` has length `1 + d`. Each task is a regression problem
/// whose planted weights scatter around a common center.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaRidge {
    pub n_features: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
    /// Standard deviation of a task's weights around the shared center.
    pub task_spread: f64,
    pub noise: f64,
    center: Vector,
}

impl MetaRidge {
    pub fn new(
        n_features: usize,
        n_train: usize,
        n_val: usize,
        seed: u64,
        task_spread: f64,
        noise: f64,
    ) -> Self {
        let mut rng = rng_from_seed(seed);
        let center = gaussian_vector(n_features, &mut rng);
        Self {
            n_features,
            n_train,
            n_val,
            seed,
            task_spread,
            noise,
            center,
        }
    }

    /// The planted center the task weights scatter around.
    pub fn center(&self) -> &Vector {
        &self.center
    }

    pub fn theta_dim(&self) -> usize {
        1 + self.n_features
    }

    /// Deterministic task for `task_seed`; the sampler itself holds no RNG state.
    pub fn sample_task(&self, task_seed: u64) -> MetaTask {
        let mut rng = rng_from_seed(derive_seed(self.seed, task_seed));
        let w = &self.center + gaussian_vector(self.n_features, &mut rng) * self.task_spread;
        let n = self.n_train + self.n_val;
        let x = gaussian_matrix(n, self.n_features, &mut rng);
        let y = &x * &w + gaussian_vector(n, &mut rng) * self.noise;
        MetaTask {
            x_train: x.rows(0, self.n_train).into_owned(),
            y_train: y.rows(0, self.n_train).into_owned(),
            x_val: x.rows(self.n_train, self.n_val).into_owned(),
            y_val: y.rows(self.n_train, self.n_val).into_owned(),
        }
    }
}

/// One sampled task of a [`MetaRidge`] problem.
///
/// `L^in(φ, θ) = ½‖Xφ − y‖²/m + (e^{θ₀}/2)‖φ − w₀‖²` with `w₀ = θ[1..]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaTask {
    pub x_train: DenseMat,
    pub y_train: Vector,
    pub x_val: DenseMat,
    pub y_val: Vector,
}

impl MetaTask {
    fn split(theta: &Vector) -> (f64, Vector) {
        (theta[0].exp(), theta.rows(1, theta.len() - 1).into_owned())
    }

    fn m(&self) -> f64 {
        self.x_train.nrows().max(1) as f64
    }

    fn m_val(&self) -> f64 {
        self.x_val.nrows().max(1) as f64
    }
}

impl BilevelProblem for MetaTask {
    fn dims(&self) -> (usize, usize) {
        let d = self.x_train.ncols();
        (d, d + 1)
    }

    fn inner_loss(&self, phi: &Vector, theta: &Vector) -> f64 {
        let (lam, w0) = Self::split(theta);
        0.5 * (&self.x_train * phi - &self.y_train).norm_squared() / self.m()
            + 0.5 * lam * (phi - w0).norm_squared()
    }

    fn outer_loss(&self, phi: &Vector, _theta: &Vector) -> f64 {
        0.5 * (&self.x_val * phi - &self.y_val).norm_squared() / self.m_val()
    }

    fn grad_phi_inner(&self, phi: &Vector, theta: &Vector) -> Vector {
        let (lam, w0) = Self::split(theta);
        self.x_train.transpose() * (&self.x_train * phi - &self.y_train) / self.m() + (phi - w0) * lam
    }

    fn grad_theta_inner(&self, phi: &Vector, theta: &Vector) -> Vector {
        let (lam, w0) = Self::split(theta);
        let diff = phi - w0;
        let mut g = Vector::zeros(theta.len());
        g[0] = 0.5 * lam * diff.norm_squared();
        g.rows_mut(1, diff.len()).copy_from(&(-diff * lam));
        g
    }

    fn grad_phi_outer(&self, phi: &Vector, _theta: &Vector) -> Vector {
        self.x_val.transpose() * (&self.x_val * phi - &self.y_val) / self.m_val()
    }

    fn grad_theta_outer(&self, _phi: &Vector, theta: &Vector) -> Vector {
        Vector::zeros(theta.len())
    }

    fn hvp_inner(&self, _phi: &Vector, theta: &Vector, v: &Vector) -> Vector {
        self.x_train.transpose() * (&self.x_train * v) / self.m() + v * theta[0].exp()
    }

    fn cross_vjp_inner(&self, phi: &Vector, theta: &Vector, v: &Vector) -> Vector {
        let (lam, w0) = Self::split(theta);
        let mut g = Vector::zeros(theta.len());
        g[0] = lam * (phi - w0).dot(v);
        g.rows_mut(1, v.len()).copy_from(&(-v * lam));
        g
    }

    fn hvp_outer(&self, _phi: &Vector, _theta: &Vector, v: &Vector) -> Vector {
        self.x_val.transpose() * (&self.x_val * v) / self.m_val()
    }

    fn name(&self) -> &'static str {
        "meta_ridge"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inner::{minimize_inner, SolverConfig};
    use crate::problems::check_gradients;

    fn meta() -> MetaRidge {
        MetaRidge::new(4, 12, 8, 3, 0.3, 0.1)
    }

    #[test]
    fn same_seed_same_task() {
        let m = meta();
        let a = m.sample_task(5);
        let b = m.sample_task(5);
        assert_eq!(a, b);
        assert!(a.x_train.iter().zip(b.x_train.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(m.sample_task(5), m.sample_task(6));
    }

    #[test]
    fn hundred_tasks_pass_gradient_check() {
        let m = meta();
        let mut rng = rng_from_seed(77);
        for seed in 0..100 {
            let task = m.sample_task(seed);
            let phi = gaussian_vector(4, &mut rng);
            let theta = gaussian_vector(5, &mut rng) * 0.5;
            let r = check_gradients(&task, &phi, &theta, 1e-5).unwrap();
            assert!(r.max() <= 1e-5, "task {seed}: {r:?}");
        }
    }

    #[test]
    fn huge_strength_pins_solution_to_center() {
        let m = meta();
        let task = m.sample_task(1);
        let mut theta = Vector::zeros(5);
        theta[0] = 20.0;
        for i in 1..5 {
            theta[i] = 0.25 * i as f64;
        }
        // gradient entries are ~λ·ulp near the solution, so the tolerance scales with λ
        let cfg = SolverConfig {
            grad_tol: 1e-9 * theta[0].exp(),
            ..SolverConfig::default()
        };
        let rep = minimize_inner(&task, &theta, &Vector::zeros(4), &cfg).unwrap();
        assert!(rep.converged);
        let w0 = theta.rows(1, 4).into_owned();
        assert!((rep.phi_hat - w0).norm() <= 1e-6);
    }
}
