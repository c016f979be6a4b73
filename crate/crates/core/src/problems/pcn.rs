use super::BilevelProblem;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{gaussian_vector, rng_from_seed, Vector};

/// Layered network whose activity is the minimizer of a predictive-coding energy.
///
/// `E(φ, θ) = ½‖φ⁰ − x‖² + ½ Σₗ ‖φˡ⁺¹ − tanh(Wˡφˡ + bˡ)‖²` with outer cost
/// `½‖φᴸ − y‖²`. φ stacks the layer activities `φ⁰..φᴸ`; θ stacks, per layer,
/// `Wˡ` in row-major order followed by `bˡ`. The input layer is a free
/// variable softly anchored to `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveCodingNet {
    pub sizes: Vec<usize>,
    pub x: Vector,
    pub y: Vector,
    /// Weights drawn at construction, returned by `initial_theta`.
    pub theta0: Vector,
}

struct LayerState {
    /// tanh(Wφ + b)
    act: Vector,
    /// tanh'(Wφ + b)
    slope: Vector,
    /// φˡ⁺¹ − act
    resid: Vector,
}

impl PredictiveCodingNet {
    pub fn new(sizes: Vec<usize>, x: Vector, y: Vector, theta0: Vector) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "need at least two non-empty layers, got {sizes:?}"
            )));
        }
        check_dim(sizes[0], x.len())?;
        check_dim(*sizes.last().unwrap(), y.len())?;
        let net = Self { sizes, x, y, theta0: Vector::zeros(0) };
        check_dim(net.theta_len(), theta0.len())?;
        Ok(Self { theta0, ..net })
    }

    /// Seeded network with `N(0, 1/fan_in)` weights, `N(0, 0.1²)` biases,
    /// a standard normal input and a target in `[-0.5, 0.5]`-ish range.
    pub fn random(sizes: &[usize], seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let x = gaussian_vector(sizes[0], &mut rng);
        let y = gaussian_vector(*sizes.last().unwrap(), &mut rng) * 0.3;
        let mut theta = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            theta.extend((gaussian_vector(fan_in * fan_out, &mut rng) * scale).iter());
            theta.extend((gaussian_vector(fan_out, &mut rng) * 0.1).iter());
        }
        Self::new(sizes.to_vec(), x, y, Vector::from_vec(theta)).expect("valid layout")
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn phi_len(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn theta_len(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    fn phi_offset(&self, l: usize) -> usize {
        self.sizes[..l].iter().sum()
    }

    fn theta_offset(&self, l: usize) -> usize {
        self.sizes[..=l].windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    fn layer<'a>(&self, phi: &'a Vector, l: usize) -> nalgebra::DVectorView<'a, f64> {
        phi.rows(self.phi_offset(l), self.sizes[l])
    }

    fn bias<'a>(&self, theta: &'a Vector, l: usize) -> nalgebra::DVectorView<'a, f64> {
        let (rows, cols) = (self.sizes[l + 1], self.sizes[l]);
        theta.rows(self.theta_offset(l) + rows * cols, rows)
    }

    fn weight_matrix(&self, theta: &Vector, l: usize) -> nalgebra::DMatrix<f64> {
        let (rows, cols) = (self.sizes[l + 1], self.sizes[l]);
        let off = self.theta_offset(l);
        nalgebra::DMatrix::from_row_slice(rows, cols, &theta.as_slice()[off..off + rows * cols])
    }

    fn states(&self, phi: &Vector, theta: &Vector) -> Vec<LayerState> {
        (0..self.n_layers())
            .map(|l| {
                let pre = self.weight_matrix(theta, l) * self.layer(phi, l) + self.bias(theta, l);
                let act = pre.map(f64::tanh);
                let slope = act.map(|t| 1.0 - t * t);
                let resid = self.layer(phi, l + 1) - &act;
                LayerState { act, slope, resid }
            })
            .collect()
    }

    /// Stacked activities of the explicit feedforward computation from input `x`.
    pub fn forward_pass(&self, theta: &Vector, x: &Vector) -> Result<Vector> {
        check_dim(self.sizes[0], x.len())?;
        check_dim(self.theta_len(), theta.len())?;
        let mut out = Vec::with_capacity(self.phi_len());
        out.extend(x.iter());
        let mut current = x.clone();
        for l in 0..self.n_layers() {
            current = (self.weight_matrix(theta, l) * &current + self.bias(theta, l)).map(f64::tanh);
            out.extend(current.iter());
        }
        Ok(Vector::from_vec(out))
    }

    /// Output-layer slice of a stacked activity vector.
    pub fn output<'a>(&self, phi: &'a Vector) -> nalgebra::DVectorView<'a, f64> {
        self.layer(phi, self.n_layers())
    }
}

impl BilevelProblem for PredictiveCodingNet {
    fn dims(&self) -> (usize, usize) {
        (self.phi_len(), self.theta_len())
    }

    fn inner_loss(&self, phi: &Vector, theta: &Vector) -> f64 {
        let anchor = 0.5 * (self.layer(phi, 0) - &self.x).norm_squared();
        anchor
            + self
                .states(phi, theta)
                .iter()
                .map(|s| 0.5 * s.resid.norm_squared())
                .sum::<f64>()
    }

    fn outer_loss(&self, phi: &Vector, _theta: &Vector) -> f64 {
        0.5 * (self.output(phi) - &self.y).norm_squared()
    }

    fn grad_phi_inner(&self, phi: &Vector, theta: &Vector) -> Vector {
        let states = self.states(phi, theta);
        let mut g = Vector::zeros(self.phi_len());
        let off0 = self.phi_offset(0);
        g.rows_mut(off0, self.sizes[0])
            .copy_from(&(self.layer(phi, 0) - &self.x));
        for (l, s) in states.iter().enumerate() {
            let q = s.slope.component_mul(&s.resid);
            let back = self.weight_matrix(theta, l).transpose() * q;
            let mut below = g.rows_mut(self.phi_offset(l), self.sizes[l]);
            below -= back;
            let mut above = g.rows_mut(self.phi_offset(l + 1), self.sizes[l + 1]);
            above += &s.resid;
        }
        g
    }

    fn grad_theta_inner(&self, phi: &Vector, theta: &Vector) -> Vector {
        let states = self.states(phi, theta);
        let mut g = Vector::zeros(self.theta_len());
        for (l, s) in states.iter().enumerate() {
            let q = s.slope.component_mul(&s.resid);
            let below = self.layer(phi, l);
            let (rows, cols) = (self.sizes[l + 1], self.sizes[l]);
            let off = self.theta_offset(l);
            for i in 0..rows {
                for j in 0..cols {
                    g[off + i * cols + j] = -q[i] * below[j];
                }
                g[off + rows * cols + i] = -q[i];
            }
        }
        g
    }

    fn grad_phi_outer(&self, phi: &Vector, _theta: &Vector) -> Vector {
        let mut g = Vector::zeros(self.phi_len());
        let l = self.n_layers();
        g.rows_mut(self.phi_offset(l), self.sizes[l])
            .copy_from(&(self.output(phi) - &self.y));
        g
    }

    fn grad_theta_outer(&self, _phi: &Vector, theta: &Vector) -> Vector {
        Vector::zeros(theta.len())
    }

    fn hvp_inner(&self, phi: &Vector, theta: &Vector, v: &Vector) -> Vector {
        let states = self.states(phi, theta);
        let mut hv = Vector::zeros(self.phi_len());
        hv.rows_mut(0, self.sizes[0]).copy_from(&self.layer(v, 0));
        for (l, s) in states.iter().enumerate() {
            let w = self.weight_matrix(theta, l);
            let d_pre = &w * self.layer(v, l);
            // d(slope) = -2·tanh·slope·d_pre
            let d_slope = s.act.component_mul(&s.slope).component_mul(&d_pre) * -2.0;
            let d_resid = self.layer(v, l + 1) - s.slope.component_mul(&d_pre);
            let d_q = d_slope.component_mul(&s.resid) + s.slope.component_mul(&d_resid);
            let mut below = hv.rows_mut(self.phi_offset(l), self.sizes[l]);
            below -= w.transpose() * d_q;
            let mut above = hv.rows_mut(self.phi_offset(l + 1), self.sizes[l + 1]);
            above += d_resid;
        }
        hv
    }

    fn cross_vjp_inner(&self, phi: &Vector, theta: &Vector, v: &Vector) -> Vector {
        // gradient in θ of Σₗ ⟨vˡ⁺¹, rˡ⟩ − ⟨Wˡvˡ, sˡ∘rˡ⟩
        let states = self.states(phi, theta);
        let mut g = Vector::zeros(self.theta_len());
        for (l, s) in states.iter().enumerate() {
            let w = self.weight_matrix(theta, l);
            let v_below = self.layer(v, l);
            let v_above = self.layer(v, l + 1);
            let d_pre = &w * v_below;
            let q = s.slope.component_mul(&s.resid);
            // derivative of the layer term with respect to the pre-activation
            let z = Vector::from_fn(s.act.len(), |i, _| {
                let (t, sl, r) = (s.act[i], s.slope[i], s.resid[i]);
                -sl * v_above[i] + d_pre[i] * (2.0 * t * sl * r + sl * sl)
            });
            let below = self.layer(phi, l);
            let (rows, cols) = (self.sizes[l + 1], self.sizes[l]);
            let off = self.theta_offset(l);
            for i in 0..rows {
                for j in 0..cols {
                    g[off + i * cols + j] = z[i] * below[j] - q[i] * v_below[j];
                }
                g[off + rows * cols + i] = z[i];
            }
        }
        g
    }

    fn hvp_outer(&self, _phi: &Vector, _theta: &Vector, v: &Vector) -> Vector {
        let mut out = Vector::zeros(self.phi_len());
        let l = self.n_layers();
        let off = self.phi_offset(l);
        out.rows_mut(off, self.sizes[l]).copy_from(&v.rows(off, self.sizes[l]));
        out
    }

    fn initial_theta(&self) -> Vector {
        self.theta0.clone()
    }

    fn name(&self) -> &'static str {
        "pcn"
    }
}
