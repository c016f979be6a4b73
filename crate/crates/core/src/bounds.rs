//! Error-bound experiments.
//!
//! Solver error is injected exactly (`‖φ̂ − φ*‖ = δ`) and the resulting
//! gradient error is measured against the dense oracle. The experiments
//! check three scaling laws: linear error in δ for implicit differentiation,
//! the `B^in(δ+δ′)/β + B^out δ′ + Cβ/(1+β)` shape for two-point equilibrium
//! propagation, and square-root error in δ for EP at its best β.

use std::io::{Read, Write};

use nalgebra::SymmetricEigen;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergrad::{augmented_theta_grad, cg_pi, default_rbp_rate, oracle_exact, rbp_pi, assemble_gradient, PiVector};
use crate::inner::{minimize_augmented, solve_exact, SolverConfig};
use crate::linalg::{
    derive_seed, extremal_ritz_values, gaussian_matrix, gaussian_vector, random_unit_vector, rng_from_seed, solve_spd,
    DenseMat, Vector,
};
use crate::problems::BilevelProblem;

/// Fixed CSV header of every sweep file.
pub const CSV_HEADER: [&str; 8] = [
    "method",
    "beta",
    "delta",
    "delta_prime",
    "seed",
    "grad_error",
    "bound_value",
    "status",
];

/// One cell of an error-vs-(β, δ) experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub method: String,
    pub beta: f64,
    pub delta: f64,
    pub delta_prime: f64,
    pub seed: u64,
    pub grad_error: f64,
    pub bound_value: Option<f64>,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
}

impl SweepRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

fn fmt_f64(x: f64) -> String {
    // 17 significant digits
    format!("{x:.16e}")
}

pub fn write_sweep_csv<W: Write>(records: &[SweepRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in records {
        w.write_record([
            r.method.clone(),
            fmt_f64(r.beta),
            fmt_f64(r.delta),
            fmt_f64(r.delta_prime),
            r.seed.to_string(),
            fmt_f64(r.grad_error),
            r.bound_value.map(fmt_f64).unwrap_or_default(),
            r.status.clone(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: Read>(input: R) -> Result<Vec<SweepRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let bad = |what: &str| Error::Config(format!("malformed sweep CSV: {what}"));
    let header = rd.headers().map_err(|e| Error::Io(e.to_string()))?;
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(bad("unexpected header"));
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| Error::Io(e.to_string()))?;
        let f = |i: usize| -> Result<f64> { row[i].parse().map_err(|_| bad(&row[i])) };
        out.push(SweepRecord {
            method: row[0].to_string(),
            beta: f(1)?,
            delta: f(2)?,
            delta_prime: f(3)?,
            seed: row[4].parse().map_err(|_| bad(&row[4]))?,
            grad_error: f(5)?,
            bound_value: if row[6].is_empty() { None } else { Some(f(6)?) },
            status: row[7].to_string(),
        });
    }
    Ok(out)
}

/// Constants of the smoothness and convexity assumptions, plus the fitted
/// finite-difference constant `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub b_in: f64,
    pub b_out: f64,
    pub c: f64,
    pub mu: f64,
    pub rho: f64,
    pub l: f64,
    pub sigma: f64,
}

/// Floor applied to estimated constants so they stay strictly positive.
pub const CONSTANT_FLOOR: f64 = 1e-12;

/// `φ* + δ·u` with `u` uniform on the unit sphere.
pub fn inject_error(phi_star: &Vector, delta: f64, seed: u64) -> Result<Vector> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidParameter(format!("delta must be >= 0, got {delta}")));
    }
    if delta == 0.0 || phi_star.is_empty() {
        return Ok(phi_star.clone());
    }
    let mut rng = rng_from_seed(seed);
    Ok(phi_star + random_unit_vector(phi_star.len(), &mut rng) * delta)
}

/// `B^in(δ+δ′)/β + B^out·δ′ + C·β/(1+β)`.
pub fn eval_ep_bound(k: &BoundConstants, delta: f64, delta_prime: f64, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::NonPositiveBeta(beta));
    }
    Ok(k.b_in * (delta + delta_prime) / beta + k.b_out * delta_prime + k.c * beta / (1.0 + beta))
}

/// Closed-form upper bound on the best achievable value of [`eval_ep_bound`].
pub fn optimal_bound_closed_form(k: &BoundConstants, delta: f64, delta_prime: f64) -> f64 {
    k.b_out * delta_prime + 2.0 * (k.c * k.b_in * (delta + delta_prime)).sqrt()
}

/// Grid minimum of [`eval_ep_bound`] over 1000 log-spaced β in `[1e-6, 1e3]`.
pub fn optimal_beta_bound(k: &BoundConstants, delta: f64, delta_prime: f64) -> Result<(f64, f64)> {
    if delta + delta_prime >= k.c / k.b_in {
        return Err(Error::ConditionViolated(format!(
            "delta + delta' = {} but C / B_in = {}",
            delta + delta_prime,
            k.c / k.b_in
        )));
    }
    let mut best = (f64::NAN, f64::INFINITY);
    for beta in log_grid(1e-6, 1e3, 1000) {
        let b = eval_ep_bound(k, delta, delta_prime, beta)?;
        if b < best.1 {
            best = (beta, b);
        }
    }
    Ok(best)
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Exact first-phase solution and oracle gradient at θ.
fn exact_reference(problem: &dyn BilevelProblem, theta: &Vector) -> Result<(Vector, Vector)> {
    let phi0 = solve_exact(problem, theta, 0.0, &Vector::zeros(problem.dims().0))?.phi_hat;
    let oracle = oracle_exact(problem, &phi0, theta)?.grad;
    Ok((phi0, oracle))
}

fn two_point(problem: &dyn BilevelProblem, theta: &Vector, phi0: &Vector, phib: &Vector, beta: f64) -> Vector {
    (augmented_theta_grad(problem, phib, theta, beta) - problem.grad_theta_inner(phi0, theta)) / beta
}

fn failed(method: &str, beta: f64, delta: f64, delta_prime: f64, seed: u64, e: &Error) -> SweepRecord {
    SweepRecord {
        method: method.to_string(),
        beta,
        delta,
        delta_prime,
        seed,
        grad_error: f64::NAN,
        bound_value: None,
        status: format!("failed: {e}"),
    }
}

/// Two-point EP error over a β grid with injected phase errors.
///
/// Both equilibria are solved exactly, then perturbed: φ̂₀ by δ along the
/// direction drawn from `(seed, 0)`, φ̂β by δ′ along `(seed, 1)`. A β whose
/// nudged phase cannot be solved yields failed records for that β only.
pub fn run_beta_sweep(
    problem: &dyn BilevelProblem,
    theta: &Vector,
    betas: &[f64],
    delta: f64,
    delta_prime: f64,
    seeds: &[u64],
    constants: Option<&BoundConstants>,
) -> Result<Vec<SweepRecord>> {
    let (phi0, oracle) = exact_reference(problem, theta)?;
    let cells: Vec<(usize, usize)> = (0..betas.len())
        .flat_map(|b| (0..seeds.len()).map(move |s| (b, s)))
        .collect();
    let phases: Vec<Result<Vector>> = betas
        .par_iter()
        .map(|&beta| {
            if !(beta > 0.0) {
                return Err(Error::NonPositiveBeta(beta));
            }
            solve_exact(problem, theta, beta, &phi0).map(|r| r.phi_hat)
        })
        .collect();
    let records = cells
        .par_iter()
        .map(|&(bi, si)| {
            let (beta, seed) = (betas[bi], seeds[si]);
            let phib = match &phases[bi] {
                Ok(p) => p,
                Err(e) => return failed("ep2", beta, delta, delta_prime, seed, e),
            };
            let cell = || -> Result<SweepRecord> {
                let p0 = inject_error(&phi0, delta, derive_seed(seed, 0))?;
                let pb = inject_error(phib, delta_prime, derive_seed(seed, 1))?;
                let est = two_point(problem, theta, &p0, &pb, beta);
                let bound_value = constants
                    .map(|k| eval_ep_bound(k, delta, delta_prime, beta))
                    .transpose()?;
                Ok(SweepRecord {
                    method: "ep2".into(),
                    beta,
                    delta,
                    delta_prime,
                    seed,
                    grad_error: (est - &oracle).norm(),
                    bound_value,
                    status: "ok".into(),
                })
            };
            cell().unwrap_or_else(|e| failed("ep2", beta, delta, delta_prime, seed, &e))
        })
        .collect();
    Ok(records)
}

/// Two-point EP error with δ injected into the first phase and the nudged
/// phase left to the solver, warm-started from the perturbed φ̂₀. Each record
/// stores the δ′ it actually reached, so `bound_value` uses the measured δ′.
pub fn run_natural_beta_sweep(
    problem: &dyn BilevelProblem,
    theta: &Vector,
    betas: &[f64],
    delta: f64,
    seeds: &[u64],
    solver: &SolverConfig,
    constants: Option<&BoundConstants>,
) -> Result<Vec<SweepRecord>> {
    let (phi0, oracle) = exact_reference(problem, theta)?;
    let cells: Vec<(f64, u64)> = betas.iter().flat_map(|&b| seeds.iter().map(move |&s| (b, s))).collect();
    let records = cells
        .par_iter()
        .map(|&(beta, seed)| {
            let cell = || -> Result<SweepRecord> {
                if !(beta > 0.0) {
                    return Err(Error::NonPositiveBeta(beta));
                }
                let p0 = inject_error(&phi0, delta, derive_seed(seed, 0))?;
                let pb = minimize_augmented(problem, theta, beta, &p0, solver)?.phi_hat;
                let delta_prime = (&pb - solve_exact(problem, theta, beta, &pb)?.phi_hat).norm();
                let est = two_point(problem, theta, &p0, &pb, beta);
                let bound_value = constants
                    .map(|k| eval_ep_bound(k, delta, delta_prime, beta))
                    .transpose()?;
                Ok(SweepRecord {
                    method: "ep2_natural".into(),
                    beta,
                    delta,
                    delta_prime,
                    seed,
                    grad_error: (est - &oracle).norm(),
                    bound_value,
                    status: "ok".into(),
                })
            };
            cell().unwrap_or_else(|e| failed("ep2_natural", beta, delta, f64::NAN, seed, &e))
        })
        .collect();
    Ok(records)
}

/// Mean successful `grad_error` per distinct β, in first-appearance order.
pub fn mean_error_by_beta(records: &[SweepRecord]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    for r in records.iter().filter(|r| r.is_ok()) {
        match out.iter_mut().find(|(b, _, _)| *b == r.beta) {
            Some(slot) => {
                slot.1 += r.grad_error;
                slot.2 += 1;
            }
            None => out.push((r.beta, r.grad_error, 1)),
        }
    }
    out.into_iter().map(|(b, s, n)| (b, s / n as f64)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMethod {
    Cg,
    Rbp,
    EpOptBeta,
}

impl ScalingMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            ScalingMethod::Cg => "cg",
            ScalingMethod::Rbp => "rbp",
            ScalingMethod::EpOptBeta => "ep_opt_beta",
        }
    }
}

impl std::str::FromStr for ScalingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cg" => Ok(ScalingMethod::Cg),
            "rbp" => Ok(ScalingMethod::Rbp),
            "ep_opt_beta" | "ep" => Ok(ScalingMethod::EpOptBeta),
            other => Err(Error::Config(format!("unknown scaling method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    /// Random directions averaged per δ.
    pub seeds: usize,
    pub master_seed: u64,
    /// Second-phase tolerance for CG/RBP, small enough that δ′ ≈ 0.
    pub phase2_tol: f64,
    pub rbp_max_iters: usize,
    /// β candidates for `ep_opt_beta`.
    pub beta_grid: Vec<f64>,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            master_seed: 0,
            phase2_tol: 1e-14,
            rbp_max_iters: 100_000,
            beta_grid: log_grid(1e-5, 1.0, 101),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingResult {
    pub slope: f64,
    /// `(δ, mean gradient error)`
    pub points: Vec<(f64, f64)>,
    pub records: Vec<SweepRecord>,
}

/// Gradient error against injected first-phase error δ, and its log-log slope.
pub fn run_delta_scaling(
    problem: &dyn BilevelProblem,
    theta: &Vector,
    method: ScalingMethod,
    deltas: &[f64],
    cfg: &ScalingConfig,
) -> Result<ScalingResult> {
    if cfg.seeds == 0 {
        return Err(Error::Config("delta scaling needs at least one seed".into()));
    }
    let (phi0, oracle) = exact_reference(problem, theta)?;
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|i| derive_seed(cfg.master_seed, i)).collect();
    let tag = method.tag();

    let (points, records): (Vec<(f64, f64)>, Vec<Vec<SweepRecord>>) = match method {
        ScalingMethod::Cg | ScalingMethod::Rbp => {
            let per_delta: Vec<Vec<SweepRecord>> = deltas
                .par_iter()
                .map(|&delta| {
                    seeds
                        .iter()
                        .map(|&seed| {
                            let cell = || -> Result<SweepRecord> {
                                let phi = inject_error(&phi0, delta, seed)?;
                                let pi = match method {
                                    ScalingMethod::Cg => {
                                        cg_pi(problem, &phi, theta, 10 * phi.len() + 100, cfg.phase2_tol)?.0
                                    }
                                    _ => {
                                        let alpha = default_rbp_rate(problem, &phi, theta);
                                        rbp_pi(problem, &phi, theta, alpha, cfg.rbp_max_iters, cfg.phase2_tol)?.0
                                    }
                                };
                                let grad = assemble_gradient(problem, &phi, theta, &PiVector(pi))?;
                                Ok(SweepRecord {
                                    method: tag.into(),
                                    beta: 0.0,
                                    delta,
                                    delta_prime: 0.0,
                                    seed,
                                    grad_error: (grad - &oracle).norm(),
                                    bound_value: None,
                                    status: "ok".into(),
                                })
                            };
                            cell().unwrap_or_else(|e| failed(tag, 0.0, delta, 0.0, seed, &e))
                        })
                        .collect()
                })
                .collect();
            let points = deltas
                .iter()
                .zip(&per_delta)
                .map(|(&d, recs)| (d, mean_ok(recs)))
                .collect();
            (points, per_delta)
        }
        ScalingMethod::EpOptBeta => {
            let phases: Vec<Result<Vector>> = cfg
                .beta_grid
                .par_iter()
                .map(|&beta| solve_exact(problem, theta, beta, &phi0).map(|r| r.phi_hat))
                .collect();
            let per_delta: Vec<(f64, Vec<SweepRecord>)> = deltas
                .par_iter()
                .map(|&delta| {
                    let mut best: Option<(f64, Vec<SweepRecord>)> = None;
                    for (bi, &beta) in cfg.beta_grid.iter().enumerate() {
                        let Ok(phib) = &phases[bi] else { continue };
                        let recs: Vec<SweepRecord> = seeds
                            .iter()
                            .map(|&seed| {
                                let cell = || -> Result<SweepRecord> {
                                    let p0 = inject_error(&phi0, delta, derive_seed(seed, 0))?;
                                    let pb = inject_error(phib, delta, derive_seed(seed, 1))?;
                                    let est = two_point(problem, theta, &p0, &pb, beta);
                                    Ok(SweepRecord {
                                        method: tag.into(),
                                        beta,
                                        delta,
                                        delta_prime: delta,
                                        seed,
                                        grad_error: (est - &oracle).norm(),
                                        bound_value: None,
                                        status: "ok".into(),
                                    })
                                };
                                cell().unwrap_or_else(|e| failed(tag, beta, delta, delta, seed, &e))
                            })
                            .collect();
                        let m = mean_ok(&recs);
                        if m.is_finite() && best.as_ref().is_none_or(|(b, _)| m < *b) {
                            best = Some((m, recs));
                        }
                    }
                    best.unwrap_or((f64::NAN, Vec::new()))
                })
                .collect();
            let points = deltas.iter().zip(&per_delta).map(|(&d, (m, _))| (d, *m)).collect();
            (points, per_delta.into_iter().map(|(_, r)| r).collect())
        }
    };
    let slope = crate::linalg::fit_loglog_slope(&points)?;
    Ok(ScalingResult {
        slope,
        points,
        records: records.into_iter().flatten().collect(),
    })
}

fn mean_ok(records: &[SweepRecord]) -> f64 {
    let ok: Vec<f64> = records.iter().filter(|r| r.is_ok()).map(|r| r.grad_error).collect();
    if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter().sum::<f64>() / ok.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantsConfig {
    /// Radius of the φ-ball around φ* that pairs are sampled from.
    pub radius: f64,
    pub pairs: usize,
    pub seed: u64,
    /// β grid of the noise-free sweep that the constant C is fitted on.
    pub c_betas: Vec<f64>,
}

impl Default for ConstantsConfig {
    fn default() -> Self {
        Self {
            radius: 1.0,
            pairs: 200,
            seed: 0,
            c_betas: log_grid(1e-3, 1.0, 13),
        }
    }
}

/// Empirical constants around φ*θ.
///
/// μ and L are extremal Ritz values of the inner Hessian at φ*. Lipschitz
/// constants are the largest difference quotients over sampled pairs in the
/// ball; for `B^in` the directional quotients `‖∂φ∂θL^in·d‖` are folded in
/// too. C is the smallest value making the bound dominate a noise-free
/// two-point sweep.
pub fn estimate_constants(problem: &dyn BilevelProblem, theta: &Vector, cfg: &ConstantsConfig) -> Result<BoundConstants> {
    if cfg.pairs < 10 {
        return Err(Error::RegionTooSmall(cfg.pairs));
    }
    let (np, _) = problem.dims();
    let (phi_star, _) = exact_reference(problem, theta)?;
    let (mu, l) = extremal_ritz_values(|v| problem.hvp_inner(&phi_star, theta, v), np, 20_000, cfg.seed);

    let mut rng = rng_from_seed(cfg.seed);
    let sample = |rng: &mut rand_chacha::ChaCha8Rng| {
        let u = random_unit_vector(np, rng);
        let r = cfg.radius * rand::Rng::random::<f64>(rng).powf(1.0 / np as f64);
        &phi_star + u * r
    };
    let (mut b_in, mut b_out, mut rho, mut sigma) = (0f64, 0f64, 0f64, 0f64);
    for _ in 0..cfg.pairs {
        let a = sample(&mut rng);
        let b = sample(&mut rng);
        let dist = (&a - &b).norm();
        if dist < 1e-12 {
            continue;
        }
        let dir = (&a - &b) / dist;
        let v = random_unit_vector(np, &mut rng);
        b_in = b_in
            .max((problem.grad_theta_inner(&a, theta) - problem.grad_theta_inner(&b, theta)).norm() / dist)
            .max(problem.cross_vjp_inner(&a, theta, &dir).norm());
        b_out = b_out.max((problem.grad_theta_outer(&a, theta) - problem.grad_theta_outer(&b, theta)).norm() / dist);
        rho = rho.max((problem.hvp_inner(&a, theta, &v) - problem.hvp_inner(&b, theta, &v)).norm() / dist);
        sigma = sigma.max((problem.cross_vjp_inner(&a, theta, &v) - problem.cross_vjp_inner(&b, theta, &v)).norm() / dist);
    }
    let mut k = BoundConstants {
        b_in: b_in.max(CONSTANT_FLOOR),
        b_out: b_out.max(CONSTANT_FLOOR),
        c: 0.0,
        mu: mu.max(CONSTANT_FLOOR),
        rho: rho.max(CONSTANT_FLOOR),
        l: l.max(CONSTANT_FLOOR),
        sigma: sigma.max(CONSTANT_FLOOR),
    };
    let clean = run_beta_sweep(problem, theta, &cfg.c_betas, 0.0, 0.0, &[0], None)?;
    k.c = fit_c(&k, &clean);
    Ok(k)
}

/// Smallest C such that `eval_ep_bound` dominates every successful record.
pub fn fit_c(k: &BoundConstants, records: &[SweepRecord]) -> f64 {
    records
        .iter()
        .filter(|r| r.is_ok() && r.beta > 0.0)
        .map(|r| {
            let slack = r.grad_error - k.b_in * (r.delta + r.delta_prime) / r.beta - k.b_out * r.delta_prime;
            slack * (1.0 + r.beta) / r.beta
        })
        .fold(CONSTANT_FLOOR, f64::max)
}

/// Outcome of one perturbed-linear-system trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationTrial {
    pub measured: f64,
    pub bound: f64,
    /// `ε_A·‖A⁻¹‖`, always below 1.
    pub contraction: f64,
}

impl PerturbationTrial {
    /// Bound holds, up to rounding in the two solves.
    pub fn holds(&self) -> bool {
        self.measured <= self.bound * (1.0 + 1e-9) + 1e-14
    }
}

/// `‖A⁻¹‖/(1 − ε_A‖A⁻¹‖)·(ε_b + ‖A⁻¹b‖ε_A)`; `None` when `ε_A‖A⁻¹‖ ≥ 1`.
pub fn perturbed_system_bound(inv_norm: f64, eps_a: f64, eps_b: f64, solution_norm: f64) -> Option<f64> {
    let contraction = eps_a * inv_norm;
    (contraction < 1.0).then(|| inv_norm / (1.0 - contraction) * (eps_b + solution_norm * eps_a))
}

fn spectral_norm_sym(m: &DenseMat) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .fold(0.0, |acc: f64, x| acc.max(x.abs()))
}

/// Random SPD system `Ax = b` and a symmetric perturbation with `ε_A‖A⁻¹‖ < 1`.
pub fn perturbation_trial(seed: u64) -> Result<PerturbationTrial> {
    let mut rng = rng_from_seed(seed);
    let n = 2 + (rand::Rng::random::<u64>(&mut rng) % 9) as usize;
    let q = gaussian_matrix(n, n, &mut rng).qr().q();
    let eig = Vector::from_fn(n, |_, _| 0.5 + 4.5 * rand::Rng::random::<f64>(&mut rng));
    let a = &q * DenseMat::from_diagonal(&eig) * q.transpose();
    let a = (&a + a.transpose()) * 0.5;
    let inv_norm = 1.0 / eig.min();

    let raw = gaussian_matrix(n, n, &mut rng);
    let sym = (&raw + raw.transpose()) * 0.5;
    let target = 0.95 * rand::Rng::random::<f64>(&mut rng) / inv_norm;
    let e = &sym * (target / spectral_norm_sym(&sym));
    let a_pert = &a + &e;
    let eps_a = spectral_norm_sym(&(&a - &a_pert));

    let b = gaussian_vector(n, &mut rng);
    let db = gaussian_vector(n, &mut rng) * (0.1 * rand::Rng::random::<f64>(&mut rng));
    let b_pert = &b + &db;
    let eps_b = (&b - &b_pert).norm();

    let x = solve_spd(&a, &b)?;
    let a_pert = (&a_pert + a_pert.transpose()) * 0.5;
    let x_pert = solve_spd(&a_pert, &b_pert)?;
    let bound = perturbed_system_bound(inv_norm, eps_a, eps_b, x.norm())
        .ok_or_else(|| Error::ConditionViolated("eps_A ||A^-1|| >= 1".into()))?;
    Ok(PerturbationTrial {
        measured: (x - x_pert).norm(),
        bound,
        contraction: eps_a * inv_norm,
    })
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
