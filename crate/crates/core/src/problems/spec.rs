//! JSON construction of suite problems.
//!
//! ```json
//! {"name": "quad", "n_phi": 10, "n_theta": 4, "gamma": 0.0, "seed": 0}
//! {"name": "ridge", "n_train": 80, "n_val": 20, "n_features": 10, "per_coordinate": false, "seed": 0}
//! {"name": "meta_ridge", "n_features": 5, "n_train": 20, "n_val": 20, "task_spread": 0.3, "noise": 0.1, "seed": 0}
//! {"name": "pcn", "sizes": [2, 3, 1], "seed": 0}
//! {"name": "p1"}
//! ```
//!
//! Omitted parameters take the defaults above; unknown fields are rejected.

use serde::{Deserialize, Serialize};

use super::{BilevelProblem, MetaRidge, PredictiveCodingNet, QuadraticBilevel, RidgeHyperopt};
use crate::error::{Error, Result};
use crate::linalg::Vector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    P1,
    Quad {
        #[serde(default = "d_n_phi")]
        n_phi: usize,
        #[serde(default = "d_n_theta")]
        n_theta: usize,
        #[serde(default)]
        gamma: f64,
        #[serde(default)]
        seed: u64,
    },
    Ridge {
        #[serde(default = "d_ridge_train")]
        n_train: usize,
        #[serde(default = "d_ridge_val")]
        n_val: usize,
        #[serde(default = "d_features")]
        n_features: usize,
        #[serde(default)]
        per_coordinate: bool,
        #[serde(default)]
        seed: u64,
    },
    MetaRidge {
        #[serde(default = "d_meta_features")]
        n_features: usize,
        #[serde(default = "d_meta_n")]
        n_train: usize,
        #[serde(default = "d_meta_n")]
        n_val: usize,
        #[serde(default = "d_spread")]
        task_spread: f64,
        #[serde(default = "d_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Pcn {
        #[serde(default = "d_sizes")]
        sizes: Vec<usize>,
        #[serde(default)]
        seed: u64,
    },
}

fn d_n_phi() -> usize {
    10
}
fn d_n_theta() -> usize {
    4
}
fn d_ridge_train() -> usize {
    80
}
fn d_ridge_val() -> usize {
    20
}
fn d_features() -> usize {
    10
}
fn d_meta_features() -> usize {
    5
}
fn d_meta_n() -> usize {
    20
}
fn d_spread() -> f64 {
    0.3
}
fn d_noise() -> f64 {
    super::ridge::TARGET_NOISE
}
fn d_sizes() -> Vec<usize> {
    vec![2, 3, 1]
}

impl ProblemSpec {
    /// Parameters filled with their defaults, as `{"name": ...}` would.
    pub fn named(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::json!({ "name": name }))
            .map_err(|e| Error::Config(format!("problem `{name}`: {e}")))
    }

    pub fn set_seed(&mut self, new_seed: u64) {
        match self {
            ProblemSpec::P1 => {}
            ProblemSpec::Quad { seed, .. }
            | ProblemSpec::Ridge { seed, .. }
            | ProblemSpec::MetaRidge { seed, .. }
            | ProblemSpec::Pcn { seed, .. } => *seed = new_seed,
        }
    }

    pub fn build(&self) -> Result<ProblemInstance> {
        Ok(match self {
            ProblemSpec::P1 => ProblemInstance::Single(Box::new(QuadraticBilevel::p1())),
            &ProblemSpec::Quad { n_phi, n_theta, gamma, seed } => {
                if n_phi == 0 || n_theta == 0 || !(gamma >= 0.0) {
                    return Err(Error::Config(
                        "quad needs n_phi, n_theta >= 1 and gamma >= 0".into(),
                    ));
                }
                ProblemInstance::Single(Box::new(QuadraticBilevel::random(seed, n_phi, n_theta, gamma)))
            }
            &ProblemSpec::Ridge { n_train, n_val, n_features, per_coordinate, seed } => {
                if n_train == 0 || n_val == 0 || n_features == 0 {
                    return Err(Error::Config("ridge sizes must be positive".into()));
                }
                ProblemInstance::Single(Box::new(RidgeHyperopt::synthetic(
                    n_train,
                    n_val,
                    n_features,
                    seed,
                    per_coordinate,
                )))
            }
            &ProblemSpec::MetaRidge { n_features, n_train, n_val, task_spread, noise, seed } => {
                if n_train == 0 || n_val == 0 || n_features == 0 {
                    return Err(Error::Config("meta_ridge sizes must be positive".into()));
                }
                ProblemInstance::Meta(MetaRidge::new(n_features, n_train, n_val, seed, task_spread, noise))
            }
            ProblemSpec::Pcn { sizes, seed } => {
                if sizes.len() < 2 || sizes.contains(&0) {
                    return Err(Error::Config(format!("pcn sizes invalid: {sizes:?}")));
                }
                ProblemInstance::Single(Box::new(PredictiveCodingNet::random(sizes, *seed)))
            }
        })
    }
}

/// A built problem: either a single bilevel problem or a task distribution.
pub enum ProblemInstance {
    Single(Box<dyn BilevelProblem>),
    Meta(MetaRidge),
}

impl ProblemInstance {
    pub fn theta_dim(&self) -> usize {
        match self {
            ProblemInstance::Single(p) => p.dims().1,
            ProblemInstance::Meta(m) => m.theta_dim(),
        }
    }

    pub fn phi_dim(&self) -> usize {
        match self {
            ProblemInstance::Single(p) => p.dims().0,
            ProblemInstance::Meta(m) => m.n_features,
        }
    }

    pub fn initial_theta(&self) -> Vector {
        match self {
            ProblemInstance::Single(p) => p.initial_theta(),
            ProblemInstance::Meta(m) => Vector::zeros(m.theta_dim()),
        }
    }

    /// The problem for a given task seed; single problems ignore the seed.
    pub fn task(&self, task_seed: u64) -> Box<dyn BilevelProblem + '_> {
        match self {
            ProblemInstance::Single(p) => Box::new(Borrowed(p.as_ref())),
            ProblemInstance::Meta(m) => Box::new(m.sample_task(task_seed)),
        }
    }

    pub fn single(&self) -> Result<&dyn BilevelProblem> {
        match self {
            ProblemInstance::Single(p) => Ok(p.as_ref()),
            ProblemInstance::Meta(_) => Err(Error::Config(
                "this command needs a single problem, not a task distribution".into(),
            )),
        }
    }
}

struct Borrowed<'a>(&'a dyn BilevelProblem);

impl BilevelProblem for Borrowed<'_> {
    fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }
    fn inner_loss(&self, phi: &Vector, theta: &Vector) -> f64 {
        self.0.inner_loss(phi, theta)
    }
    fn outer_loss(&self, phi: &Vector, theta: &Vector) -> f64 {
        self.0.outer_loss(phi, theta)
    }
    fn grad_phi_inner(&self, phi: &Vector, theta: &Vector) -> Vector {
        self.0.grad_phi_inner(phi, theta)
    }
    fn grad_theta_inner(&self, phi: &Vector, theta: &Vector) -> Vector {
        self.0.grad_theta_inner(phi, theta)
    }
    fn grad_phi_outer(&self, phi: &Vector, theta: &Vector) -> Vector {
        self.0.grad_phi_outer(phi, theta)
    }
    fn grad_theta_outer(&self, phi: &Vector, theta: &Vector) -> Vector {
        self.0.grad_theta_outer(phi, theta)
    }
    fn hvp_inner(&self, phi: &Vector, theta: &Vector, v: &Vector) -> Vector {
        self.0.hvp_inner(phi, theta, v)
    }
    fn cross_vjp_inner(&self, phi: &Vector, theta: &Vector, v: &Vector) -> Vector {
        self.0.cross_vjp_inner(phi, theta, v)
    }
    fn hvp_outer(&self, phi: &Vector, theta: &Vector, v: &Vector) -> Vector {
        self.0.hvp_outer(phi, theta, v)
    }
    fn initial_theta(&self) -> Vector {
        self.0.initial_theta()
    }
    fn name(&self) -> &'static str {
        self.0.name()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let s: ProblemSpec = serde_json::from_str(r#"{"name": "quad", "seed": 3}"#).unwrap();
        assert_eq!(
            s,
            ProblemSpec::Quad { n_phi: 10, n_theta: 4, gamma: 0.0, seed: 3 }
        );
        assert_eq!(s.build().unwrap().theta_dim(), 4);
    }

    #[test]
    fn unknown_fields_rejected() {
        let r: std::result::Result<ProblemSpec, _> =
            serde_json::from_str(r#"{"name": "quad", "n_phii": 3}"#);
        assert!(r.is_err());
        let r: std::result::Result<ProblemSpec, _> = serde_json::from_str(r#"{"name": "nope"}"#);
        assert!(r.is_err());
    }

    #[test]
    fn seed_override() {
        let mut s = ProblemSpec::named("pcn").unwrap();
        s.set_seed(9);
        assert_eq!(s, ProblemSpec::Pcn { sizes: vec![2, 3, 1], seed: 9 });
    }

    #[test]
    fn meta_is_not_single() {
        let inst = ProblemSpec::named("meta_ridge").unwrap().build().unwrap();
        assert!(inst.single().is_err());
        assert_eq!(inst.theta_dim(), 6);
        assert_eq!(inst.task(3).dims(), (5, 6));
    }
}
