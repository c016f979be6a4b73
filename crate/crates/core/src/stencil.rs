//! Finite-difference stencils in the nudging strength β.
//!
//! A forward stencil with `p` points samples `f(iβ)` for `i = 0..p-1` and
//! combines them with coefficients `α` chosen so that `Σ αᵢ f(iβ) = β f'(0) +
//! O(β^p)`. The coefficients solve the Vandermonde system `(i^k)_{k,i} α = e₁`.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `p` solved in exact rational arithmetic.
pub const EXACT_MAX_POINTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StencilKind {
    Forward,
    Symmetric,
}

impl fmt::Display for StencilKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StencilKind::Forward => f.write_str("forward"),
            StencilKind::Symmetric => f.write_str("symmetric"),
        }
    }
}

impl std::str::FromStr for StencilKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(StencilKind::Forward),
            "symmetric" | "central" => Ok(StencilKind::Symmetric),
            other => Err(Error::Config(format!("unknown stencil kind `{other}`"))),
        }
    }
}

/// Coefficients, nodes, and step of a finite-difference estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdStencil {
    pub points: usize,
    pub kind: StencilKind,
    pub coefficients: Vec<f64>,
    /// β. `solve_fd_stencil` returns 1.0; attach the real step with [`FdStencil::with_step`].
    pub step: f64,
}

impl FdStencil {
    pub fn with_step(mut self, beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::NonPositiveBeta(beta));
        }
        self.step = beta;
        Ok(self)
    }

    /// Integer node multipliers `i` such that node `i` is evaluated at `iβ`.
    pub fn nodes(&self) -> Vec<i64> {
        match self.kind {
            StencilKind::Forward => (0..self.points as i64).collect(),
            StencilKind::Symmetric => vec![-1, 0, 1],
        }
    }

    /// Pairs of (node multiplier, coefficient).
    pub fn terms(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.nodes().into_iter().zip(self.coefficients.iter().copied())
    }
}

/// Solve for the stencil coefficients. The step is left at 1.0.
pub fn solve_fd_stencil(points: usize, kind: StencilKind) -> Result<FdStencil> {
    let coefficients = match kind {
        StencilKind::Symmetric => {
            if points != 3 {
                return Err(Error::UnsupportedStencil(format!(
                    "symmetric stencils have exactly 3 points, got {points}"
                )));
            }
            vec![-0.5, 0.0, 0.5]
        }
        StencilKind::Forward => {
            if points < 2 {
                return Err(Error::UnsupportedStencil(format!(
                    "forward stencils need at least 2 points, got {points}"
                )));
            }
            if points <= EXACT_MAX_POINTS {
                forward_coefficients_exact(points)?
                    .iter()
                    .map(ratio_to_f64)
                    .collect()
            } else {
                forward_coefficients_float(points)?
            }
        }
    };
    Ok(FdStencil {
        points,
        kind,
        coefficients,
        step: 1.0,
    })
}

/// Exact forward coefficients, for `2 <= points <= EXACT_MAX_POINTS`.
pub fn forward_coefficients_exact(points: usize) -> Result<Vec<BigRational>> {
    if !(2..=EXACT_MAX_POINTS).contains(&points) {
        return Err(Error::UnsupportedStencil(format!(
            "exact forward stencils support 2..={EXACT_MAX_POINTS} points, got {points}"
        )));
    }
    let p = points;
    // row k holds i^k for i = 0..p-1; augmented column is e_1
    let mut m: Vec<Vec<BigRational>> = (0..p)
        .map(|k| {
            let mut row: Vec<BigRational> = (0..p)
                .map(|i| BigRational::from_integer(BigInt::from(i).pow(k as u32)))
                .collect();
            row.push(if k == 1 {
                BigRational::one()
            } else {
                BigRational::zero()
            });
            row
        })
        .collect();
    for col in 0..p {
        let pivot = (col..p)
            .find(|&r| !m[r][col].is_zero())
            .ok_or_else(|| Error::UnsupportedStencil("singular Vandermonde system".into()))?;
        m.swap(col, pivot);
        let inv = m[col][col].recip();
        for x in m[col].iter_mut() {
            *x = &*x * &inv;
        }
        for r in 0..p {
            if r != col && !m[r][col].is_zero() {
                let factor = m[r][col].clone();
                for c in col..=p {
                    let delta = &factor * &m[col][c];
                    m[r][c] = &m[r][c] - delta;
                }
            }
        }
    }
    Ok(m.into_iter().map(|mut row| row.pop().unwrap()).collect())
}

fn forward_coefficients_float(p: usize) -> Result<Vec<f64>> {
    let mut a: Vec<Vec<f64>> = (0..p)
        .map(|k| {
            let mut row: Vec<f64> = (0..p).map(|i| (i as f64).powi(k as i32)).collect();
            row.push(if k == 1 { 1.0 } else { 0.0 });
            row
        })
        .collect();
    for col in 0..p {
        let pivot = (col..p)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < f64::MIN_POSITIVE {
            return Err(Error::UnsupportedStencil("singular Vandermonde system".into()));
        }
        a.swap(col, pivot);
        for r in (col + 1)..p {
            let f = a[r][col] / a[col][col];
            for c in col..=p {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    let mut x = vec![0.0; p];
    for r in (0..p).rev() {
        let s: f64 = ((r + 1)..p).map(|c| a[r][c] * x[c]).sum();
        x[r] = (a[r][p] - s) / a[r][r];
    }
    Ok(x)
}

fn ratio_to_f64(r: &BigRational) -> f64 {
    r.numer().to_f64().unwrap() / r.denom().to_f64().unwrap()
}

/// `-11/6` style rendering, integers without a denominator.
pub fn format_rational(r: &BigRational) -> String {
    if r.denom().is_one() {
        r.numer().to_string()
    } else {
        let sign = if r.is_negative() { "-" } else { "" };
        format!("{sign}{}/{}", r.numer().abs(), r.denom())
    }
}

/// Space-separated coefficients as printed by `bilevel coeffs`.
pub fn format_coefficients(points: usize, kind: StencilKind) -> Result<String> {
    match kind {
        StencilKind::Symmetric => {
            solve_fd_stencil(points, kind)?;
            Ok("-1/2 0 1/2".to_string())
        }
        StencilKind::Forward if points <= EXACT_MAX_POINTS => {
            let c = forward_coefficients_exact(points)?;
            Ok(c.iter().map(format_rational).collect::<Vec<_>>().join(" "))
        }
        StencilKind::Forward => {
            let s = solve_fd_stencil(points, kind)?;
            Ok(s.coefficients
                .iter()
                .map(|c| format!("{c:.17e}"))
                .collect::<Vec<_>>()
                .join(" "))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn coefficient_table() {
        let table = [
            (2, vec![rat(-1, 1), rat(1, 1)]),
            (3, vec![rat(-3, 2), rat(2, 1), rat(-1, 2)]),
            (4, vec![rat(-11, 6), rat(3, 1), rat(-3, 2), rat(1, 3)]),
            (5, vec![rat(-25, 12), rat(4, 1), rat(-3, 1), rat(4, 3), rat(-1, 4)]),
        ];
        for (p, expected) in table {
            assert_eq!(forward_coefficients_exact(p).unwrap(), expected, "p = {p}");
            let s = solve_fd_stencil(p, StencilKind::Forward).unwrap();
            for (a, b) in s.coefficients.iter().zip(&expected) {
                assert!((a - ratio_to_f64(b)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn moment_conditions() {
        for p in 2..=6 {
            let s = solve_fd_stencil(p, StencilKind::Forward).unwrap();
            for k in 0..p {
                let m: f64 = s
                    .terms()
                    .map(|(i, a)| a * (i as f64).powi(k as i32))
                    .sum();
                let want = if k == 1 { 1.0 } else { 0.0 };
                assert!((m - want).abs() < 1e-10, "p={p} k={k}: {m}");
            }
        }
    }

    #[test]
    fn float_path_satisfies_moments() {
        for p in 9..=11 {
            let s = solve_fd_stencil(p, StencilKind::Forward).unwrap();
            let m0: f64 = s.coefficients.iter().sum();
            let m1: f64 = s.terms().map(|(i, a)| a * i as f64).sum();
            assert!(m0.abs() < 1e-6, "{m0}");
            assert!((m1 - 1.0).abs() < 1e-6, "{m1}");
        }
        // the float path agrees with the exact one where both apply
        let exact: Vec<f64> = forward_coefficients_exact(6)
            .unwrap()
            .iter()
            .map(ratio_to_f64)
            .collect();
        let float = forward_coefficients_float(6).unwrap();
        for (a, b) in exact.iter().zip(&float) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn symmetric_and_unsupported() {
        let s = solve_fd_stencil(3, StencilKind::Symmetric).unwrap();
        assert_eq!(s.coefficients, vec![-0.5, 0.0, 0.5]);
        assert_eq!(s.nodes(), vec![-1, 0, 1]);
        assert!(matches!(
            solve_fd_stencil(1, StencilKind::Forward),
            Err(Error::UnsupportedStencil(_))
        ));
        assert!(matches!(
            solve_fd_stencil(5, StencilKind::Symmetric),
            Err(Error::UnsupportedStencil(_))
        ));
    }

    #[test]
    fn formatting() {
        assert_eq!(
            format_coefficients(4, StencilKind::Forward).unwrap(),
            "-11/6 3 -3/2 1/3"
        );
        assert_eq!(format_coefficients(2, StencilKind::Forward).unwrap(), "-1 1");
        assert_eq!(
            format_coefficients(3, StencilKind::Symmetric).unwrap(),
            "-1/2 0 1/2"
        );
    }

    #[test]
    fn step_must_be_positive() {
        let s = solve_fd_stencil(2, StencilKind::Forward).unwrap();
        assert!(matches!(s.clone().with_step(0.0), Err(Error::NonPositiveBeta(_))));
        assert_eq!(s.with_step(0.1).unwrap().step, 0.1);
    }
}
