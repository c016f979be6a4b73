//! Command-line front end.
//!
//! Exit codes: 0 success, 1 a `check` that found errors above tolerance,
//! 2 bad configuration or usage, 3 numerical failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bounds::{
    estimate_constants, run_beta_sweep, run_delta_scaling, run_natural_beta_sweep, write_sweep_csv, ScalingMethod,
};
use crate::config::{
    load_json, parse_json, DeltaPrimeProtocol, DeltaScalingRunConfig, LogGrid, OutputPaths, RunConfig, SweepBetaConfig,
};
use crate::error::{check_dim, Error, Result};
use crate::hypergrad::EstimatorSpec;
use crate::inner::minimize_inner;
use crate::linalg::{derive_seed, gaussian_vector, rng_from_seed, Vector};
use crate::problems::{check_gradients, ProblemInstance, ProblemSpec};
use crate::stencil::{format_coefficients, StencilKind};
use crate::train::{final_state_json, run_bilevel, write_outputs};

#[derive(Debug, Parser)]
#[command(name = "bilevel", version, about = "Hypergradient estimators and error-bound experiments for bilevel problems")]
pub struct Cli {
    /// Worker threads for parallel sweeps and task averaging.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print one hypergradient estimate as JSON.
    Estimate(EstimateArgs),
    /// Run the outer training loop.
    Train(TrainArgs),
    /// Two-point EP error over a β grid with injected solver errors.
    SweepBeta(SweepBetaArgs),
    /// Gradient error against injected first-phase error, with log-log slope.
    DeltaScaling(DeltaScalingArgs),
    /// Print finite-difference stencil coefficients.
    Coeffs(CoeffsArgs),
    /// Compare analytic derivatives with finite differences.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the seeds in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Problem name (p1, quad, ridge, meta_ridge, pcn); overrides the config.
    #[arg(long)]
    pub problem: Option<String>,
    /// Comma-separated θ.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub theta: Option<Vec<f64>>,
    /// oracle, first_order, identity, rbp, cg or ep.
    #[arg(long)]
    pub method: Option<String>,
    /// EP nudging strength.
    #[arg(long)]
    pub beta: Option<f64>,
    /// EP stencil points.
    #[arg(long)]
    pub points: Option<usize>,
    /// EP stencil kind.
    #[arg(long)]
    pub kind: Option<StencilKind>,
    /// RBP step size; defaults to 1/L.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// RBP iteration count.
    #[arg(long)]
    pub k: Option<usize>,
    /// CG iteration cap.
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Second-phase tolerance (rbp, cg).
    #[arg(long)]
    pub tol: Option<f64>,
    /// Inner gradient-norm tolerance.
    #[arg(long)]
    pub inner_tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Problem name; overrides the config.
    #[arg(long)]
    pub problem: Option<String>,
    #[arg(long)]
    pub outer_steps: Option<usize>,
    #[arg(long)]
    pub outer_lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepBetaArgs {
    #[command(flatten)]
    pub common: Common,
    /// Problem name; overrides the config.
    #[arg(long)]
    pub problem: Option<String>,
    /// Comma-separated θ.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub theta: Option<Vec<f64>>,
    /// Injected first-phase error.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Injected second-phase error.
    #[arg(long)]
    pub delta_prime: Option<f64>,
    #[arg(long)]
    pub beta_min: Option<f64>,
    #[arg(long)]
    pub beta_max: Option<f64>,
    #[arg(long)]
    pub beta_points: Option<usize>,
    /// Perturbation seeds per β.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Estimate bound constants and fill `bound_value`.
    #[arg(long)]
    pub bound: bool,
    /// Let the solver set δ′ instead of injecting it.
    #[arg(long)]
    pub natural: bool,
    /// Nudged-phase gradient-norm tolerance (natural protocol).
    #[arg(long)]
    pub inner_tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DeltaScalingArgs {
    #[command(flatten)]
    pub common: Common,
    /// Problem name; overrides the config.
    #[arg(long)]
    pub problem: Option<String>,
    /// Comma-separated θ.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub theta: Option<Vec<f64>>,
    /// cg, rbp or ep_opt_beta.
    #[arg(long)]
    pub method: Option<ScalingMethod>,
    #[arg(long)]
    pub delta_min: Option<f64>,
    #[arg(long)]
    pub delta_max: Option<f64>,
    #[arg(long)]
    pub delta_points: Option<usize>,
    /// Perturbation seeds per δ.
    #[arg(long)]
    pub seeds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CoeffsArgs {
    /// Number of stencil nodes.
    #[arg(long)]
    pub points: usize,
    #[arg(long, default_value = "forward")]
    pub kind: StencilKind,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Problem name.
    #[arg(long, default_value = "quad")]
    pub problem: String,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
}

/// Parse `args` (including the program name) and run, writing results to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    // output is buffered so the work can run inside a thread pool
    let mut buf = Vec::new();
    let result = match cli.threads {
        Some(0) => Err(Error::Config("--threads must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))
            .and_then(|pool| pool.install(|| dispatch(cli.command, &mut buf))),
        None => dispatch(cli.command, &mut buf),
    };
    if out.write_all(&buf).and_then(|_| out.flush()).is_err() {
        return 2;
    }
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                3
            }
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Estimate(a) => cmd_estimate(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::SweepBeta(a) => cmd_sweep_beta(a, out),
        Command::DeltaScaling(a) => cmd_delta_scaling(a, out),
        Command::Coeffs(a) => cmd_coeffs(a, out),
        Command::Check(a) => cmd_check(a, out),
    }
}

fn problem_from(name: Option<&str>, fallback: Option<ProblemSpec>, seed: Option<u64>) -> Result<ProblemSpec> {
    let mut spec = match (name, fallback) {
        (Some(n), _) => ProblemSpec::named(n)?,
        (None, Some(p)) => p,
        (None, None) => return Err(Error::Config("either --config or --problem is required".into())),
    };
    if let Some(s) = seed {
        spec.set_seed(s);
    }
    Ok(spec)
}

fn theta_or_default(theta: Option<&[f64]>, instance: &ProblemInstance) -> Result<Vector> {
    match theta {
        Some(t) => {
            check_dim(instance.theta_dim(), t.len())?;
            Ok(Vector::from_column_slice(t))
        }
        None => Ok(instance.initial_theta()),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    writeln!(out, "{text}")?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
}

fn estimator_from_flags(a: &EstimateArgs) -> Result<Option<EstimatorSpec>> {
    let Some(method) = &a.method else {
        if a.beta.is_some() || a.points.is_some() || a.kind.is_some() || a.alpha.is_some() || a.k.is_some() {
            return Err(Error::Config("estimator flags need --method".into()));
        }
        return Ok(None);
    };
    let mut obj = serde_json::Map::new();
    obj.insert("method".into(), method.clone().into());
    let mut put = |key: &str, v: Option<serde_json::Value>| {
        if let Some(v) = v {
            obj.insert(key.into(), v);
        }
    };
    put("beta", a.beta.map(Into::into));
    put("points", a.points.map(Into::into));
    put("kind", a.kind.map(|k| k.to_string().into()));
    put("alpha", a.alpha.map(Into::into));
    put("k", a.k.map(Into::into));
    put("max_iters", a.max_iters.map(Into::into));
    put("tol", a.tol.map(Into::into));
    parse_json(&serde_json::Value::Object(obj).to_string())
        .map(Some)
        .map_err(|e| Error::Config(format!("estimator flags: {e}")))
}

pub fn cmd_estimate(a: EstimateArgs, out: &mut dyn Write) -> Result<i32> {
    let base: Option<RunConfig> = a.common.config.as_deref().map(load_json).transpose()?;
    let problem = problem_from(a.problem.as_deref(), base.as_ref().map(|c| c.problem.clone()), a.common.seed)?;
    let mut cfg = base.unwrap_or_else(|| RunConfig::new(problem.clone()));
    cfg.problem = problem;
    if let Some(e) = estimator_from_flags(&a)? {
        cfg.estimator = e;
    }
    if let Some(t) = a.inner_tol {
        cfg.solver.grad_tol = t;
    }
    cfg.validate()?;
    let instance = cfg.problem.build()?;
    let theta = theta_or_default(a.theta.as_deref().or(cfg.theta0.as_deref()), &instance)?;
    let task = instance.task(a.common.seed.unwrap_or(0));
    let inner = minimize_inner(task.as_ref(), &theta, &Vector::zeros(instance.phi_dim()), &cfg.solver)?;
    let est = cfg.estimator.estimate(task.as_ref(), &inner.phi_hat, &theta, &cfg.solver)?;
    let text = serde_json::to_string(&est).map_err(|e| Error::Io(e.to_string()))?;
    if let Some(dir) = &a.common.out {
        ensure_dir(dir)?;
        std::fs::write(dir.join("estimate.json"), format!("{text}\n"))?;
    }
    emit(out, &text)?;
    Ok(0)
}

pub fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let base: Option<RunConfig> = a.common.config.as_deref().map(load_json).transpose()?;
    let problem = problem_from(a.problem.as_deref(), base.as_ref().map(|c| c.problem.clone()), a.common.seed)?;
    let mut cfg = base.unwrap_or_else(|| RunConfig::new(problem.clone()));
    cfg.problem = problem;
    if let Some(s) = a.common.seed {
        cfg.outer.task_seed = s;
    }
    if let Some(n) = a.outer_steps {
        cfg.outer.outer_steps = n;
    }
    if let Some(lr) = a.outer_lr {
        cfg.outer.outer_lr = lr;
    }
    if let Some(dir) = &a.common.out {
        ensure_dir(dir)?;
        cfg.output = OutputPaths::in_dir(dir);
    }
    let log = run_bilevel(&cfg)?;
    write_outputs(&cfg, &log)?;
    emit(out, &final_state_json(&cfg, &log)?)?;
    Ok(0)
}

pub fn cmd_sweep_beta(a: SweepBetaArgs, out: &mut dyn Write) -> Result<i32> {
    let base: Option<SweepBetaConfig> = a.common.config.as_deref().map(load_json).transpose()?;
    let problem = problem_from(a.problem.as_deref(), base.as_ref().map(|c| c.problem.clone()), a.common.seed)?;
    let mut cfg = base.unwrap_or_else(|| SweepBetaConfig::new(problem.clone()));
    cfg.problem = problem;
    if let Some(s) = a.common.seed {
        cfg.master_seed = s;
    }
    cfg.theta = a.theta.or(cfg.theta);
    cfg.delta = a.delta.unwrap_or(cfg.delta);
    cfg.delta_prime = a.delta_prime.unwrap_or(cfg.delta_prime);
    cfg.betas = LogGrid {
        min: a.beta_min.unwrap_or(cfg.betas.min),
        max: a.beta_max.unwrap_or(cfg.betas.max),
        points: a.beta_points.unwrap_or(cfg.betas.points),
    };
    cfg.seeds = a.seeds.unwrap_or(cfg.seeds);
    if a.natural {
        cfg.protocol = DeltaPrimeProtocol::Natural;
    }
    if let Some(t) = a.inner_tol {
        cfg.solver.grad_tol = t;
    }
    if a.bound && cfg.constants.is_none() {
        cfg.constants = Some(Default::default());
    }
    cfg.validate()?;

    let instance = cfg.problem.build()?;
    let problem = instance.single()?;
    let theta = theta_or_default(cfg.theta.as_deref(), &instance)?;
    let constants = cfg
        .constants
        .as_ref()
        .map(|c| estimate_constants(problem, &theta, c))
        .transpose()?;
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|i| derive_seed(cfg.master_seed, i)).collect();
    let betas = cfg.betas.values()?;
    let records = match cfg.protocol {
        DeltaPrimeProtocol::Fixed => {
            run_beta_sweep(problem, &theta, &betas, cfg.delta, cfg.delta_prime, &seeds, constants.as_ref())?
        }
        DeltaPrimeProtocol::Natural => {
            run_natural_beta_sweep(problem, &theta, &betas, cfg.delta, &seeds, &cfg.solver, constants.as_ref())?
        }
    };
    let mut buf = Vec::new();
    write_sweep_csv(&records, &mut buf)?;
    match &a.common.out {
        Some(dir) => {
            ensure_dir(dir)?;
            std::fs::write(dir.join("sweep_beta.csv"), &buf)?;
            if let Some(k) = &constants {
                std::fs::write(dir.join("constants.json"), to_json(k)? + "\n")?;
            }
        }
        None => out.write_all(&buf)?,
    }
    Ok(0)
}

pub fn cmd_delta_scaling(a: DeltaScalingArgs, out: &mut dyn Write) -> Result<i32> {
    let base: Option<DeltaScalingRunConfig> = a.common.config.as_deref().map(load_json).transpose()?;
    let problem = problem_from(a.problem.as_deref(), base.as_ref().map(|c| c.problem.clone()), a.common.seed)?;
    let mut cfg = base.unwrap_or_else(|| DeltaScalingRunConfig::new(problem.clone(), ScalingMethod::Cg));
    cfg.problem = problem;
    if let Some(s) = a.common.seed {
        cfg.settings.master_seed = s;
    }
    cfg.theta = a.theta.or(cfg.theta);
    cfg.method = a.method.unwrap_or(cfg.method);
    cfg.deltas = LogGrid {
        min: a.delta_min.unwrap_or(cfg.deltas.min),
        max: a.delta_max.unwrap_or(cfg.deltas.max),
        points: a.delta_points.unwrap_or(cfg.deltas.points),
    };
    cfg.settings.seeds = a.seeds.unwrap_or(cfg.settings.seeds);
    cfg.validate()?;

    let instance = cfg.problem.build()?;
    let theta = theta_or_default(cfg.theta.as_deref(), &instance)?;
    let result = run_delta_scaling(instance.single()?, &theta, cfg.method, &cfg.deltas.values()?, &cfg.settings)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        method: &'a str,
        slope: f64,
        points: &'a [(f64, f64)],
    }
    let summary = to_json(&Summary {
        method: cfg.method.tag(),
        slope: result.slope,
        points: &result.points,
    })?;
    if let Some(dir) = &a.common.out {
        ensure_dir(dir)?;
        let mut buf = Vec::new();
        write_sweep_csv(&result.records, &mut buf)?;
        std::fs::write(dir.join("delta_scaling.csv"), &buf)?;
        std::fs::write(dir.join("delta_scaling.json"), summary.clone() + "\n")?;
    }
    emit(out, &summary)?;
    Ok(0)
}

pub fn cmd_coeffs(a: CoeffsArgs, out: &mut dyn Write) -> Result<i32> {
    emit(out, &format_coefficients(a.points, a.kind)?)?;
    Ok(0)
}

pub fn cmd_check(a: CheckArgs, out: &mut dyn Write) -> Result<i32> {
    let base: Option<ProblemSpec> = a.common.config.as_deref().map(load_json).transpose()?;
    let seed = a.common.seed.unwrap_or(0);
    let spec = match base {
        Some(mut p) => {
            p.set_seed(seed);
            p
        }
        None => problem_from(Some(&a.problem), None, Some(seed))?,
    };
    let instance = spec.build()?;
    let task = instance.task(seed);
    let (np, nt) = task.dims();
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    let phi = gaussian_vector(np, &mut rng);
    let theta = gaussian_vector(nt, &mut rng);
    let report = check_gradients(task.as_ref(), &phi, &theta, a.h)?;
    let max = report.max();

    #[derive(Serialize)]
    struct Check<'a, R: Serialize> {
        problem: &'a str,
        seed: u64,
        h: f64,
        tol: f64,
        errors: R,
        max_rel_error: f64,
        pass: bool,
    }
    let pass = max <= a.tol;
    let text = to_json(&Check {
        problem: task.name(),
        seed,
        h: a.h,
        tol: a.tol,
        errors: &report,
        max_rel_error: max,
        pass,
    })?;
    if let Some(dir) = &a.common.out {
        ensure_dir(dir)?;
        std::fs::write(dir.join("check.json"), text.clone() + "\n")?;
    }
    emit(out, &text)?;
    Ok(if pass { 0 } else { 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_str(args: &[&str]) -> (i32, String) {
        let mut buf = Vec::new();
        let code = run(std::iter::once("bilevel").chain(args.iter().copied()), &mut buf);
        (code, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn coeffs_table() {
        assert_eq!(run_str(&["coeffs", "--points", "4", "--kind", "forward"]), (0, "-11/6 3 -3/2 1/3\n".into()));
        assert_eq!(run_str(&["coeffs", "--points", "3", "--kind", "symmetric"]).1, "-1/2 0 1/2\n");
        assert_eq!(run_str(&["coeffs", "--points", "4", "--kind", "symmetric"]).0, 2);
        assert_eq!(run_str(&["coeffs", "--points", "1"]).0, 2);
    }

    #[test]
    fn estimate_p1_ep() {
        let (code, text) = run_str(&["estimate", "--problem", "p1", "--theta", "2", "--method", "ep", "--beta", "0.1", "--points", "2"]);
        assert_eq!(code, 0);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let g = v["grad"][0].as_f64().unwrap();
        assert!((g - 2.0 / 1.1).abs() < 1e-6, "{g}");
    }

    #[test]
    fn check_quad_passes() {
        let (code, text) = run_str(&["check", "--problem", "quad", "--seed", "0"]);
        assert_eq!(code, 0, "{text}");
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["max_rel_error"].as_f64().unwrap() <= 1e-6);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run_str(&["estimate", "--problem", "nope"]).0, 2);
        assert_eq!(run_str(&["estimate", "--problem", "p1", "--theta", "1,2"]).0, 2);
        assert_eq!(run_str(&["estimate", "--problem", "p1", "--method", "cg", "--beta", "0.1"]).0, 2);
        assert_eq!(run_str(&["estimate", "--problem", "p1", "--method", "ep", "--beta", "-0.1"]).0, 2);
        assert_eq!(run_str(&["frobnicate"]).0, 2);
        // identity HVP with lr 2.5: RBP iterate grows as 1.5^k
        assert_eq!(run_str(&["estimate", "--problem", "p1", "--theta", "1", "--method", "rbp", "--alpha", "2.5", "--k", "1000"]).0, 3);
        assert_eq!(run_str(&["check", "--problem", "quad", "--tol", "1e-30"]).0, 1);
    }
}
