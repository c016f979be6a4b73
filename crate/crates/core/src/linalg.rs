//! Dense vector and matrix primitives shared by every estimator.
//!
//! Vectors and matrices are `nalgebra` dense types. Only the oracle and the
//! experiment code ever materialize a matrix; everything else works with
//! Hessian-vector products.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};

pub type Vector = DVector<f64>;
pub type DenseMat = DMatrix<f64>;

/// Largest dimension any dense routine will accept.
pub const DENSE_CAP: usize = 2000;

/// Maximum absolute deviation from symmetry `solve_spd` tolerates.
pub const SYMMETRY_TOL: f64 = 1e-10;

pub fn check_dense_cap(n: usize) -> Result<()> {
    if n > DENSE_CAP {
        Err(Error::DenseCapExceeded { n, cap: DENSE_CAP })
    } else {
        Ok(())
    }
}

pub fn all_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Deterministic RNG for a seed. Every random draw in the crate goes through here.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream for `(master, index)` so that parallel and
/// serial sweeps draw identical numbers.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gaussian_vector(n: usize, rng: &mut ChaCha8Rng) -> Vector {
    Vector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMat {
    // row-major fill so the draw order does not depend on nalgebra's storage
    let data: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    DenseMat::from_row_slice(rows, cols, &data)
}

/// Uniformly distributed point on the unit sphere in `n` dimensions.
pub fn random_unit_vector(n: usize, rng: &mut ChaCha8Rng) -> Vector {
    loop {
        let v = gaussian_vector(n, rng);
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Solve `A x = b` for symmetric positive definite `A` by Cholesky.
pub fn solve_spd(a: &DenseMat, b: &Vector) -> Result<Vector> {
    let n = a.nrows();
    check_dim(n, a.ncols())?;
    check_dim(n, b.len())?;
    check_dense_cap(n)?;
    if !a.iter().all(|x| x.is_finite()) || !all_finite(b) {
        return Err(Error::NonFinite("solve_spd input"));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let dev = (a[(i, j)] - a[(j, i)]).abs();
            if dev > SYMMETRY_TOL {
                return Err(Error::NotSpd(format!(
                    "asymmetry {dev:e} at ({i}, {j})"
                )));
            }
        }
    }
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotSpd("non-positive pivot".into()))?;
    let mut x = chol.solve(b);
    // one step of iterative refinement keeps ill-conditioned residuals small
    let r = b - a * &x;
    x += chol.solve(&r);
    Ok(x)
}

/// Central-difference gradient of a scalar function.
pub fn central_diff_grad<F>(f: F, x: &Vector, h: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step h must be > 0, got {h}")));
    }
    let mut grad = Vector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let xi = x[i];
        let (hi, lo) = (xi + h, xi - h);
        probe[i] = hi;
        let fp = f(&probe);
        probe[i] = lo;
        let fm = f(&probe);
        probe[i] = xi;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteEval);
        }
        // divide by the step actually taken, not the nominal one
        grad[i] = (fp - fm) / (hi - lo);
    }
    Ok(grad)
}

/// Central-difference Jacobian-vector product of a vector-valued map along `dir`.
pub fn central_diff_jvp<F>(f: F, x: &Vector, dir: &Vector, h: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> Vector,
{
    check_dim(x.len(), dir.len())?;
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step h must be > 0, got {h}")));
    }
    // a power-of-two step keeps `dir * h` exact
    let h = 2f64.powi(h.log2().round() as i32);
    let fp = f(&(x + dir * h));
    let fm = f(&(x - dir * h));
    if !all_finite(&fp) || !all_finite(&fm) {
        return Err(Error::NonFiniteEval);
    }
    Ok((fp - fm) / (2.0 * h))
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::InsufficientPoints {
            needed: 3,
            got: points.len(),
        });
    }
    for &(x, y) in points {
        if !(x > 0.0) {
            return Err(Error::NonPositiveValue(x));
        }
        if !(y > 0.0) {
            return Err(Error::NonPositiveValue(y));
        }
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 0.0 {
        // all abscissae coincide, no slope is defined
        return Err(Error::InsufficientPoints {
            needed: 2,
            got: 1,
        });
    }
    Ok(sxy / sxx)
}

/// Largest eigenvalue of a symmetric PSD operator by power iteration on the
/// Rayleigh quotient. Stops early once the quotient is stable to `1e-15`
/// relative.
pub fn power_iteration<F>(op: F, n: usize, max_iters: usize, seed: u64) -> f64
where
    F: Fn(&Vector) -> Vector,
{
    if n == 0 {
        return 0.0;
    }
    let mut rng = rng_from_seed(seed);
    let mut v = random_unit_vector(n, &mut rng);
    let mut lambda = 0.0;
    for _ in 0..max_iters {
        let w = op(&v);
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 || !norm.is_finite() {
            return next.max(0.0);
        }
        v = w / norm;
        let done = (next - lambda).abs() <= 1e-15 * next.abs().max(1e-300);
        lambda = next;
        if done {
            break;
        }
    }
    lambda
}

/// Extremal (smallest, largest) eigenvalues of a symmetric PD operator: power
/// iteration for the top, then power iteration on `L·I − H` for the bottom.
pub fn extremal_ritz_values<F>(op: F, n: usize, max_iters: usize, seed: u64) -> (f64, f64)
where
    F: Fn(&Vector) -> Vector,
{
    let top = power_iteration(&op, n, max_iters, seed);
    // slight over-shift keeps the shifted operator PSD despite a truncated top estimate
    let shift = top * (1.0 + 1e-12);
    let gap = power_iteration(|v| v * shift - op(v), n, max_iters, derive_seed(seed, 1));
    (shift - gap, top)
}

/// Assemble a dense matrix column by column from a linear operator.
pub fn materialize<F>(op: F, n: usize) -> Result<DenseMat>
where
    F: Fn(&Vector) -> Vector,
{
    check_dense_cap(n)?;
    let mut m = DenseMat::zeros(n, n);
    let mut e = Vector::zeros(n);
    for j in 0..n {
        e[j] = 1.0;
        let col = op(&e);
        check_dim(n, col.len())?;
        m.set_column(j, &col);
        e[j] = 0.0;
    }
    Ok(m)
}


/// Serialize a [`Vector`] as a plain JSON array.
pub mod serde_vector {
    use super::Vector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }

    pub mod option {
        use super::Vector;
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer>(v: &Option<Vector>, s: S) -> Result<S::Ok, S::Error> {
            v.as_ref().map(|v| v.as_slice().to_vec()).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vector>, D::Error> {
            Ok(Option::<Vec<f64>>::deserialize(d)?.map(Vector::from_vec))
        }
    }
}
