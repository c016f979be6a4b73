//! C ABI over the `bilevel` library.
//!
//! Problems live behind an opaque `BlProblem` handle built from the same JSON
//! problem specs the CLI accepts. Every call returns a `BlStatus`; on failure
//! `bl_last_error` copies a message for the calling thread. Panics are caught
//! at the boundary and reported as `BL_STATUS_PANIC`.
//!
//! The header is generated into `include/bilevel.h` by the build script.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use bilevel::config::{parse_json, validate_estimator};
use bilevel::inner::minimize_inner;
use bilevel::{
    solve_fd_stencil, BilevelProblem, Error, EstimatorSpec, ProblemInstance, ProblemSpec, SolverConfig, StencilKind,
    Vector,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Bad JSON, bad parameters or unsupported stencil.
    Config = 3,
    /// Vector length does not match the problem dimensions.
    DimMismatch = 4,
    /// Divergence, indefinite curvature or another numerical failure.
    Numerical = 5,
    Panic = 6,
}

/// Opaque problem handle.
pub struct BlProblem {
    inner: Box<dyn BilevelProblem>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(status: BlStatus, msg: impl Into<String>) -> BlStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> BlStatus {
    let status = match e {
        Error::DimMismatch { .. } => BlStatus::DimMismatch,
        ref other if other.is_config() => BlStatus::Config,
        _ => BlStatus::Numerical,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> BlStatus) -> BlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(BlStatus::Panic, "panic inside bilevel"),
    }
}

/// `None` for a null pointer, which callers treat as "use defaults".
unsafe fn opt_str<'a>(s: *const c_char) -> Result<Option<&'a str>, BlStatus> {
    if s.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(s)
        .to_str()
        .map(Some)
        .map_err(|_| fail(BlStatus::InvalidUtf8, "string argument is not UTF-8"))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], BlStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(BlStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], BlStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(BlStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn expect_len(what: &str, expected: usize, got: usize) -> Result<(), BlStatus> {
    if expected == got {
        Ok(())
    } else {
        Err(fail(BlStatus::DimMismatch, format!("{what}: expected length {expected}, got {got}")))
    }
}

fn solver_from(json: Option<&str>) -> Result<SolverConfig, BlStatus> {
    let cfg: SolverConfig = match json {
        Some(s) => parse_json(s).map_err(from_error)?,
        None => SolverConfig::default(),
    };
    cfg.validate().map_err(from_error)?;
    Ok(cfg)
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Build a problem from a JSON spec such as `{"name": "quad", "seed": 0}`.
/// Task distributions (`meta_ridge`) are not available through this interface.
///
/// # Safety
/// `spec_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bl_problem_new(spec_json: *const c_char, out: *mut *mut BlProblem) -> BlStatus {
    guard(|| {
        if out.is_null() {
            return fail(BlStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let Some(text) = tri!(opt_str(spec_json)) else {
            return fail(BlStatus::NullPointer, "spec_json is null");
        };
        let spec: ProblemSpec = tri!(parse_json(text).map_err(from_error));
        let inner = match spec.build() {
            Ok(ProblemInstance::Single(p)) => p,
            Ok(ProblemInstance::Meta(_)) => {
                return fail(BlStatus::Config, "task distributions are not supported over the C interface")
            }
            Err(e) => return from_error(e),
        };
        *out = Box::into_raw(Box::new(BlProblem { inner }));
        BlStatus::Ok
    })
}

/// # Safety
/// `problem` must come from `bl_problem_new` and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn bl_problem_free(problem: *mut BlProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// # Safety
/// `problem` must be a live handle; `n_phi` and `n_theta` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn bl_problem_dims(problem: *const BlProblem, n_phi: *mut usize, n_theta: *mut usize) -> BlStatus {
    guard(|| {
        if problem.is_null() || n_phi.is_null() || n_theta.is_null() {
            return fail(BlStatus::NullPointer, "null argument");
        }
        let (p, t) = (*problem).inner.dims();
        *n_phi = p;
        *n_theta = t;
        BlStatus::Ok
    })
}

/// The problem's default starting θ.
///
/// # Safety
/// `problem` must be a live handle; `theta_out` must hold `n_theta` doubles.
#[no_mangle]
pub unsafe extern "C" fn bl_problem_initial_theta(problem: *const BlProblem, theta_out: *mut f64, n_theta: usize) -> BlStatus {
    guard(|| {
        if problem.is_null() {
            return fail(BlStatus::NullPointer, "problem is null");
        }
        let p = &(*problem).inner;
        tri!(expect_len("theta_out", p.dims().1, n_theta));
        let out = tri!(slice_mut(theta_out, n_theta, "theta_out"));
        out.copy_from_slice(p.initial_theta().as_slice());
        BlStatus::Ok
    })
}

/// Minimize the inner loss from φ = 0. `solver_json` may be null for defaults.
/// `iters_out` may be null.
///
/// # Safety
/// `problem` must be a live handle; arrays must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn bl_solve_inner(
    problem: *const BlProblem,
    theta: *const f64,
    n_theta: usize,
    solver_json: *const c_char,
    phi_out: *mut f64,
    n_phi: usize,
    iters_out: *mut usize,
) -> BlStatus {
    guard(|| {
        if problem.is_null() {
            return fail(BlStatus::NullPointer, "problem is null");
        }
        let p = (*problem).inner.as_ref();
        let (np, nt) = p.dims();
        tri!(expect_len("theta", nt, n_theta));
        tri!(expect_len("phi_out", np, n_phi));
        let theta = Vector::from_column_slice(tri!(slice(theta, n_theta, "theta")));
        let cfg = tri!(solver_from(tri!(opt_str(solver_json))));
        let rep = tri!(minimize_inner(p, &theta, &Vector::zeros(np), &cfg).map_err(from_error));
        tri!(slice_mut(phi_out, n_phi, "phi_out")).copy_from_slice(rep.phi_hat.as_slice());
        if !iters_out.is_null() {
            *iters_out = rep.iters;
        }
        BlStatus::Ok
    })
}

/// Hypergradient at (φ̂, θ). `estimator_json` is an estimator spec such as
/// `{"method": "ep", "points": 3, "beta": 0.01}`; null selects conjugate
/// gradients. `solver_json` configures EP phases and may be null.
///
/// # Safety
/// `problem` must be a live handle; arrays must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn bl_estimate(
    problem: *const BlProblem,
    phi: *const f64,
    n_phi: usize,
    theta: *const f64,
    n_theta: usize,
    estimator_json: *const c_char,
    solver_json: *const c_char,
    grad_out: *mut f64,
    n_grad: usize,
) -> BlStatus {
    guard(|| {
        if problem.is_null() {
            return fail(BlStatus::NullPointer, "problem is null");
        }
        let p = (*problem).inner.as_ref();
        let (np, nt) = p.dims();
        tri!(expect_len("phi", np, n_phi));
        tri!(expect_len("theta", nt, n_theta));
        tri!(expect_len("grad_out", nt, n_grad));
        let phi = Vector::from_column_slice(tri!(slice(phi, n_phi, "phi")));
        let theta = Vector::from_column_slice(tri!(slice(theta, n_theta, "theta")));
        let spec: EstimatorSpec = match tri!(opt_str(estimator_json)) {
            Some(s) => tri!(parse_json(s).map_err(from_error)),
            None => EstimatorSpec::default(),
        };
        tri!(validate_estimator(&spec).map_err(from_error));
        let cfg = tri!(solver_from(tri!(opt_str(solver_json))));
        let est = tri!(spec.estimate(p, &phi, &theta, &cfg).map_err(from_error));
        tri!(slice_mut(grad_out, n_grad, "grad_out")).copy_from_slice(est.grad.as_slice());
        BlStatus::Ok
    })
}

/// Stencil coefficients α for `points` nodes; `symmetric` non-zero selects
/// the central stencil on nodes (−1, 0, 1).
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bl_stencil_coefficients(points: usize, symmetric: c_int, out: *mut f64, len: usize) -> BlStatus {
    guard(|| {
        let kind = if symmetric != 0 { StencilKind::Symmetric } else { StencilKind::Forward };
        let s = tri!(solve_fd_stencil(points, kind).map_err(from_error));
        tri!(expect_len("out", s.coefficients.len(), len));
        tri!(slice_mut(out, len, "out")).copy_from_slice(&s.coefficients);
        BlStatus::Ok
    })
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding the NUL.
///
/// # Safety
/// `buf` must hold `len` bytes, or be null with `len` 0.
#[no_mangle]
pub unsafe extern "C" fn bl_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
