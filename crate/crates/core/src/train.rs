//! The outer training loop.
//!
//! Each step solves the inner problem, estimates ∇̂θ and takes a plain
//! gradient step `θ ← θ − outer_lr·∇̂θ`. On task distributions the estimate is
//! averaged over `tasks_per_step` tasks, each cold-started from φ = 0.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{check_dim, Error, Result};
use crate::inner::minimize_inner;
use crate::linalg::{all_finite, Vector};
use crate::problems::{BilevelProblem, ProblemInstance};

pub const TRAJECTORY_HEADER: [&str; 6] = ["step", "outer_loss", "grad_norm", "inner_iters", "phase2_iters", "hvp_count"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    /// `L^out(φ̂, θ)` before the update (task mean on distributions).
    pub outer_loss: f64,
    pub grad_norm: f64,
    pub inner_iters: usize,
    pub phase2_iters: usize,
    pub hvp_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryLog {
    pub steps: Vec<StepRecord>,
    #[serde(with = "crate::linalg::serde_vector")]
    pub theta: Vector,
    /// Last inner solution; absent for task distributions and empty runs.
    #[serde(with = "crate::linalg::serde_vector::option")]
    pub phi: Option<Vector>,
}

struct StepOutcome {
    grad: Vector,
    loss: f64,
    inner_iters: usize,
    phase2_iters: usize,
    hvp_count: usize,
    phi: Vector,
}

fn one_task(problem: &dyn BilevelProblem, theta: &Vector, phi0: &Vector, cfg: &RunConfig) -> Result<StepOutcome> {
    let inner = minimize_inner(problem, theta, phi0, &cfg.solver)?;
    let est = cfg.estimator.estimate(problem, &inner.phi_hat, theta, &cfg.solver)?;
    let loss = problem.outer_loss(&inner.phi_hat, theta);
    if !loss.is_finite() {
        return Err(Error::NonFinite("outer loss"));
    }
    Ok(StepOutcome {
        grad: est.grad,
        loss,
        inner_iters: inner.iters,
        phase2_iters: est.phase2_iters,
        hvp_count: est.hvp_count,
        phi: inner.phi_hat,
    })
}

pub fn initial_theta(cfg: &RunConfig, instance: &ProblemInstance) -> Result<Vector> {
    match &cfg.theta0 {
        Some(t) => {
            check_dim(instance.theta_dim(), t.len())?;
            Ok(Vector::from_column_slice(t))
        }
        None => Ok(instance.initial_theta()),
    }
}

/// Run the outer loop. Errors carry the failing step index.
pub fn run_bilevel(cfg: &RunConfig) -> Result<TrajectoryLog> {
    cfg.validate()?;
    let instance = cfg.problem.build()?;
    let mut theta = initial_theta(cfg, &instance)?;
    let n_phi = instance.phi_dim();
    let mut phi = Vector::zeros(n_phi);
    let mut last_phi = None;
    let mut steps = Vec::with_capacity(cfg.outer.outer_steps);
    let o = &cfg.outer;

    for step in 0..o.outer_steps {
        let outcome = match &instance {
            ProblemInstance::Single(p) => {
                let start = if o.warm_start { phi.clone() } else { Vector::zeros(n_phi) };
                one_task(p.as_ref(), &theta, &start, cfg).map_err(|e| e.at_step(step))?
            }
            ProblemInstance::Meta(_) => {
                let base = o.task_seed + (step * o.tasks_per_step) as u64;
                let results: Vec<Result<StepOutcome>> = (0..o.tasks_per_step)
                    .into_par_iter()
                    .map(|j| {
                        let task = instance.task(base + j as u64);
                        one_task(task.as_ref(), &theta, &Vector::zeros(n_phi), cfg)
                    })
                    .collect();
                let mut acc: Option<StepOutcome> = None;
                for r in results {
                    let r = r.map_err(|e| e.at_step(step))?;
                    acc = Some(match acc {
                        None => r,
                        Some(mut a) => {
                            a.grad += r.grad;
                            a.loss += r.loss;
                            a.inner_iters += r.inner_iters;
                            a.phase2_iters += r.phase2_iters;
                            a.hvp_count += r.hvp_count;
                            a
                        }
                    });
                }
                let mut a = acc.expect("tasks_per_step >= 1");
                let n = o.tasks_per_step as f64;
                a.grad /= n;
                a.loss /= n;
                a
            }
        };
        let grad_norm = outcome.grad.norm();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("hypergradient").at_step(step));
        }
        steps.push(StepRecord {
            step,
            outer_loss: outcome.loss,
            grad_norm,
            inner_iters: outcome.inner_iters,
            phase2_iters: outcome.phase2_iters,
            hvp_count: outcome.hvp_count,
        });
        theta.axpy(-o.outer_lr, &outcome.grad, 1.0);
        if !all_finite(&theta) {
            return Err(Error::NonFinite("theta").at_step(step));
        }
        if matches!(instance, ProblemInstance::Single(_)) {
            last_phi = Some(outcome.phi.clone());
        }
        phi = outcome.phi;
    }
    Ok(TrajectoryLog { steps, theta, phi: last_phi })
}

pub fn write_trajectory_csv<W: Write>(log: &TrajectoryLog, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(TRAJECTORY_HEADER).map_err(io)?;
    for s in &log.steps {
        w.write_record([
            s.step.to_string(),
            format!("{:.16e}", s.outer_loss),
            format!("{:.16e}", s.grad_norm),
            s.inner_iters.to_string(),
            s.phase2_iters.to_string(),
            s.hvp_count.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Final-state document: the config with every default filled in, plus the result.
pub fn final_state_json(cfg: &RunConfig, log: &TrajectoryLog) -> Result<String> {
    #[derive(Serialize)]
    struct FinalState<'a> {
        config: &'a RunConfig,
        steps: usize,
        #[serde(with = "crate::linalg::serde_vector")]
        theta: &'a Vector,
        #[serde(with = "crate::linalg::serde_vector::option")]
        phi: &'a Option<Vector>,
        final_outer_loss: Option<f64>,
    }
    let doc = FinalState {
        config: cfg,
        steps: log.steps.len(),
        theta: &log.theta,
        phi: &log.phi,
        final_outer_loss: log.steps.last().map(|s| s.outer_loss),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Io(e.to_string()))
}

/// Write whichever outputs the config names.
pub fn write_outputs(cfg: &RunConfig, log: &TrajectoryLog) -> Result<()> {
    if let Some(path) = &cfg.output.trajectory_csv {
        write_trajectory_csv(log, std::fs::File::create(path)?)?;
    }
    if let Some(path) = &cfg.output.final_state_json {
        std::fs::write(path, final_state_json(cfg, log)? + "\n")?;
    }
    Ok(())
}
