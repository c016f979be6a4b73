//! JSON run configurations.
//!
//! Every file is validated before any compute. Unknown keys are rejected and
//! parse errors carry the path of the offending key, e.g.
//! `outer.outer_lr: invalid type: string "x", expected f64`.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bounds::{log_grid, ConstantsConfig, ScalingConfig, ScalingMethod};
use crate::error::{Error, Result};
use crate::hypergrad::EstimatorSpec;
use crate::inner::SolverConfig;
use crate::problems::ProblemSpec;
use crate::stencil::solve_fd_stencil;

/// Parse JSON into `T`, prefixing errors with the failing key path.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            Error::Config(inner.to_string())
        } else {
            Error::Config(format!("{path}: {inner}"))
        }
    })
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_json(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OuterConfig {
    pub outer_lr: f64,
    pub outer_steps: usize,
    /// Start each inner solve from the previous φ̂ (single problems only).
    pub warm_start: bool,
    /// Tasks averaged per outer step on task distributions.
    pub tasks_per_step: usize,
    /// Base seed of the task stream: step `i`, task `j` uses
    /// `task_seed + i·tasks_per_step + j`.
    pub task_seed: u64,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            outer_lr: 0.1,
            outer_steps: 100,
            warm_start: true,
            tasks_per_step: 1,
            task_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputPaths {
    pub trajectory_csv: Option<PathBuf>,
    pub final_state_json: Option<PathBuf>,
}

impl OutputPaths {
    /// `trajectory.csv` and `final_state.json` inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            trajectory_csv: Some(dir.join("trajectory.csv")),
            final_state_json: Some(dir.join("final_state.json")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub estimator: EstimatorSpec,
    #[serde(default)]
    pub outer: OuterConfig,
    /// Starting θ; the problem's default when absent.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    #[serde(default)]
    pub output: OutputPaths,
}

impl RunConfig {
    pub fn new(problem: ProblemSpec) -> Self {
        Self {
            problem,
            solver: SolverConfig::default(),
            estimator: EstimatorSpec::default(),
            outer: OuterConfig::default(),
            theta0: None,
            output: OutputPaths::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        validate_estimator(&self.estimator)?;
        let o = &self.outer;
        if !(o.outer_lr > 0.0) || !o.outer_lr.is_finite() {
            return Err(Error::Config(format!("outer.outer_lr must be > 0, got {}", o.outer_lr)));
        }
        if o.tasks_per_step == 0 {
            return Err(Error::Config("outer.tasks_per_step must be >= 1".into()));
        }
        if let Some(t) = &self.theta0 {
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config("theta0 must be finite".into()));
            }
        }
        Ok(())
    }
}

pub fn validate_estimator(spec: &EstimatorSpec) -> Result<()> {
    match *spec {
        EstimatorSpec::Oracle | EstimatorSpec::FirstOrder | EstimatorSpec::Identity => Ok(()),
        EstimatorSpec::Rbp { alpha, k, tol } => {
            if let Some(a) = alpha {
                if !(a > 0.0) || !a.is_finite() {
                    return Err(Error::Config(format!("estimator.alpha must be > 0, got {a}")));
                }
            }
            if k == 0 || !(tol >= 0.0) {
                return Err(Error::Config("estimator.k must be >= 1 and tol >= 0".into()));
            }
            Ok(())
        }
        EstimatorSpec::Cg { max_iters, tol } => {
            if max_iters == 0 || !(tol > 0.0) {
                return Err(Error::Config("estimator.max_iters must be >= 1 and tol > 0".into()));
            }
            Ok(())
        }
        EstimatorSpec::Ep { points, kind, beta, .. } => {
            solve_fd_stencil(points, kind)?.with_step(beta)?;
            Ok(())
        }
    }
}

/// Log-spaced grid description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogGrid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl LogGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.min > 0.0) || !(self.max >= self.min) || self.points == 0 || !self.max.is_finite() {
            return Err(Error::Config(format!(
                "log grid needs 0 < min <= max and points >= 1, got {self:?}"
            )));
        }
        Ok(log_grid(self.min, self.max, self.points))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBetaConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    #[serde(default = "default_betas")]
    pub betas: LogGrid,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Injected nudged-phase error; ignored by the natural protocol.
    #[serde(default = "default_delta")]
    pub delta_prime: f64,
    #[serde(default)]
    pub protocol: DeltaPrimeProtocol,
    /// Nudged-phase solver for the natural protocol.
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Estimate constants and attach bound values when present.
    #[serde(default)]
    pub constants: Option<ConstantsConfig>,
}

/// How the nudged phase gets its error: injected at exactly δ′, or whatever
/// the solver leaves when warm-started from the perturbed first phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaPrimeProtocol {
    #[default]
    Fixed,
    Natural,
}

fn default_betas() -> LogGrid {
    LogGrid { min: 1e-4, max: 1.0, points: 25 }
}
fn default_delta() -> f64 {
    1e-3
}
fn default_seeds() -> usize {
    20
}

impl SweepBetaConfig {
    pub fn new(problem: ProblemSpec) -> Self {
        Self {
            problem,
            theta: None,
            betas: default_betas(),
            delta: default_delta(),
            delta_prime: default_delta(),
            protocol: DeltaPrimeProtocol::Fixed,
            solver: SolverConfig::default(),
            seeds: default_seeds(),
            master_seed: 0,
            constants: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.betas.values()?;
        if !(self.delta >= 0.0) || !(self.delta_prime >= 0.0) {
            return Err(Error::Config("delta and delta_prime must be >= 0".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be >= 1".into()));
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaScalingRunConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    #[serde(default = "default_method")]
    pub method: ScalingMethod,
    #[serde(default = "default_deltas")]
    pub deltas: LogGrid,
    #[serde(default)]
    pub settings: ScalingConfig,
}

fn default_method() -> ScalingMethod {
    ScalingMethod::Cg
}
fn default_deltas() -> LogGrid {
    LogGrid { min: 1e-6, max: 1e-2, points: 9 }
}

impl DeltaScalingRunConfig {
    pub fn new(problem: ProblemSpec, method: ScalingMethod) -> Self {
        Self {
            problem,
            theta: None,
            method,
            deltas: default_deltas(),
            settings: ScalingConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.deltas.values()?;
        if self.settings.seeds == 0 {
            return Err(Error::Config("settings.seeds must be >= 1".into()));
        }
        if self.settings.beta_grid.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::Config("settings.beta_grid must be positive".into()));
        }
        Ok(())
    }
}
