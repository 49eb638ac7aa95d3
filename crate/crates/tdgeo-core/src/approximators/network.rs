//! Positively homogeneous feedforward networks and their residual variant.
//!
//! A network of depth L evaluates every state's feature row through the same
//! scalar chain x -> sigma(x W_1) -> sigma(. W_2) -> ... with the activation
//! applied after every layer, the last included. Both supported activations
//! are positively homogeneous (relu of degree 1, half-square of degree 2),
//! which makes the whole map homogeneous of a computable degree D and gives
//! each layer an exact Euler identity.

use super::{ApproxError, Approximator};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Square,
}

impl Activation {
    /// Homogeneity degree of the activation itself.
    pub fn degree(self) -> u32 {
        match self {
            Activation::Relu => 1,
            Activation::Square => 2,
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Square => 0.5 * z * z,
        }
    }

    /// Derivative, with the relu kink assigned slope zero at the origin.
    fn slope(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Square => z,
        }
    }
}

/// V(theta)_s = sigma(... sigma(sigma(phi_s W_1) W_2) ... W_L), one scalar
/// per state. Parameters are the column-major concatenation of the layer
/// matrices W_1, ..., W_L.
pub struct HomogeneousNetwork {
    phi: DMatrix<f64>,
    layer_dims: Vec<usize>,
    activation: Activation,
    seed: u64,
    init: DVector<f64>,
}

/// `layer_dims` lists the widths [d_1, ..., d_{L+1}]; d_1 must equal the
/// feature count and d_{L+1} must be 1. The seeded initial parameters draw
/// each entry from N(0, 1/fan_in).
pub fn homogeneous_network(
    layer_dims: &[usize],
    phi: DMatrix<f64>,
    activation: Activation,
    seed: u64,
) -> Result<HomogeneousNetwork, ApproxError> {
    if layer_dims.len() < 2 {
        return Err(ApproxError::ShapeMismatch(
            "a network needs at least one layer".into(),
        ));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(ApproxError::ShapeMismatch("zero-width layer".into()));
    }
    if layer_dims[0] != phi.ncols() {
        return Err(ApproxError::ShapeMismatch(format!(
            "first width {} does not match the {} feature columns",
            layer_dims[0],
            phi.ncols()
        )));
    }
    if *layer_dims.last().unwrap() != 1 {
        return Err(ApproxError::ShapeMismatch(
            "output width must be 1 (one value per state)".into(),
        ));
    }
    let param_dim: usize = layer_dims.windows(2).map(|w| w[0] * w[1]).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = DVector::zeros(param_dim);
    let mut offset = 0;
    for w in layer_dims.windows(2) {
        let scale = 1.0 / (w[0] as f64).sqrt();
        for k in 0..w[0] * w[1] {
            let g: f64 = StandardNormal.sample(&mut rng);
            init[offset + k] = scale * g;
        }
        offset += w[0] * w[1];
    }
    Ok(HomogeneousNetwork {
        phi,
        layer_dims: layer_dims.to_vec(),
        activation,
        seed,
        init,
    })
}

impl HomogeneousNetwork {
    pub fn depth(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Seeded initial parameter vector.
    pub fn initial_theta(&self) -> DVector<f64> {
        self.init.clone()
    }

    /// Homogeneity degree D = sum over layers of p^(L - i + 1) where p is
    /// the activation degree: depth for relu, 2^(L+1) - 2 for square.
    pub fn degree(&self) -> f64 {
        let p = self.activation.degree() as f64;
        (1..=self.depth()).map(|i| p.powi((self.depth() - i + 1) as i32)).sum()
    }

    /// Half-open parameter ranges for each layer's slice of theta.
    pub fn layer_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(self.depth());
        let mut offset = 0;
        for w in self.layer_dims.windows(2) {
            out.push(offset..offset + w[0] * w[1]);
            offset += w[0] * w[1];
        }
        out
    }

    fn unpack(&self, theta: &DVector<f64>) -> Vec<DMatrix<f64>> {
        assert_eq!(
            theta.len(),
            self.init.len(),
            "parameter vector has wrong length"
        );
        let mut mats = Vec::with_capacity(self.depth());
        let mut offset = 0;
        for w in self.layer_dims.windows(2) {
            let mat = DMatrix::from_column_slice(w[0], w[1], &theta.as_slice()[offset..offset + w[0] * w[1]]);
            offset += w[0] * w[1];
            mats.push(mat);
        }
        mats
    }

    /// Pre- and post-activation matrices (n x d_{i+1}) for every layer.
    fn forward(&self, weights: &[DMatrix<f64>]) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let mut pre = Vec::with_capacity(self.depth());
        let mut post = Vec::with_capacity(self.depth());
        let mut x = self.phi.clone();
        for w in weights {
            let z = &x * w;
            x = z.map(|v| self.activation.apply(v));
            pre.push(z);
            post.push(x.clone());
        }
        (pre, post)
    }

    /// Smallest pre-activation magnitude across all layers and states.
    /// Relu derivatives are only trustworthy when this is clear of zero,
    /// so identity checks resample parameters until it is.
    pub fn preactivation_clearance(&self, theta: &DVector<f64>) -> f64 {
        let weights = self.unpack(theta);
        let (pre, _) = self.forward(&weights);
        pre.iter()
            .flat_map(|z| z.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    /// Per-layer relative residuals of the Euler identity
    /// (dV/d vec W_i) vec W_i = p^(L - i + 1) V(theta).
    pub fn per_layer_euler_errors(&self, theta: &DVector<f64>) -> Vec<f64> {
        let v = self.value(theta);
        let j = self.jacobian(theta);
        let scale = v.norm().max(1e-12);
        let p = self.activation.degree() as f64;
        let depth = self.depth();
        self.layer_ranges()
            .iter()
            .enumerate()
            .map(|(i, range)| {
                let block = j.columns(range.start, range.len());
                let segment = DVector::from_iterator(
                    range.len(),
                    theta.as_slice()[range.clone()].iter().copied(),
                );
                let lhs = block * segment;
                let rhs = &v * p.powi((depth - i) as i32);
                (lhs - rhs).norm() / scale
            })
            .collect()
    }
}

impl Approximator for HomogeneousNetwork {
    fn param_dim(&self) -> usize {
        self.init.len()
    }

    fn state_dim(&self) -> usize {
        self.phi.nrows()
    }

    fn value(&self, theta: &DVector<f64>) -> DVector<f64> {
        let weights = self.unpack(theta);
        let (_, post) = self.forward(&weights);
        post.last().unwrap().column(0).into_owned()
    }

    fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let weights = self.unpack(theta);
        let (pre, post) = self.forward(&weights);
        let n = self.phi.nrows();
        let depth = self.depth();
        let mut j = DMatrix::zeros(n, self.param_dim());
        let ranges = self.layer_ranges();

        for s in 0..n {
            // u holds the sensitivity of the output at state s to the
            // pre-activation row of the current layer, walked backwards.
            let mut u = DVector::from_element(1, self.activation.slope(pre[depth - 1][(s, 0)]));
            for i in (0..depth).rev() {
                let x_prev: DVector<f64> = if i == 0 {
                    self.phi.row(s).transpose()
                } else {
                    post[i - 1].row(s).transpose()
                };
                // d output / d W_i is the outer product x_prev u^T, written
                // into the row in the same column-major order as unpack.
                let range = &ranges[i];
                let (din, dout) = (self.layer_dims[i], self.layer_dims[i + 1]);
                for col in 0..dout {
                    for row in 0..din {
                        j[(s, range.start + col * din + row)] = x_prev[row] * u[col];
                    }
                }
                if i > 0 {
                    let back = &weights[i] * &u;
                    u = DVector::from_fn(din, |r, _| {
                        back[r] * self.activation.slope(pre[i - 1][(s, r)])
                    });
                }
            }
        }
        j
    }

    fn claimed_degree(&self) -> Option<f64> {
        Some(self.degree())
    }
}

/// V(theta) = phi theta_1 + g(theta_2) with a homogeneous network g. The
/// linear head keeps the tangent kernel full rank; the sum itself is not
/// homogeneous of any single degree.
pub struct ResidualHomogeneousNetwork {
    phi: DMatrix<f64>,
    inner: HomogeneousNetwork,
}

pub fn residual_network(
    phi: DMatrix<f64>,
    inner: HomogeneousNetwork,
) -> Result<ResidualHomogeneousNetwork, ApproxError> {
    if phi.nrows() != inner.state_dim() {
        return Err(ApproxError::ShapeMismatch(format!(
            "linear head covers {} states but the network covers {}",
            phi.nrows(),
            inner.state_dim()
        )));
    }
    Ok(ResidualHomogeneousNetwork { phi, inner })
}

impl ResidualHomogeneousNetwork {
    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn inner(&self) -> &HomogeneousNetwork {
        &self.inner
    }

    pub fn head_dim(&self) -> usize {
        self.phi.ncols()
    }

    /// Seeded initial parameters: zero head, network init for the tail.
    pub fn initial_theta(&self) -> DVector<f64> {
        let mut theta = DVector::zeros(self.param_dim());
        theta
            .rows_mut(self.head_dim(), self.inner.param_dim())
            .copy_from(&self.inner.initial_theta());
        theta
    }

    fn split<'a>(&self, theta: &'a DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        assert_eq!(theta.len(), self.param_dim());
        let head = theta.rows(0, self.head_dim()).into_owned();
        let tail = theta.rows(self.head_dim(), self.inner.param_dim()).into_owned();
        (head, tail)
    }
}

impl Approximator for ResidualHomogeneousNetwork {
    fn param_dim(&self) -> usize {
        self.phi.ncols() + self.inner.param_dim()
    }

    fn state_dim(&self) -> usize {
        self.phi.nrows()
    }

    fn value(&self, theta: &DVector<f64>) -> DVector<f64> {
        let (head, tail) = self.split(theta);
        &self.phi * head + self.inner.value(&tail)
    }

    fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let (_, tail) = self.split(theta);
        let mut j = DMatrix::zeros(self.state_dim(), self.param_dim());
        j.columns_mut(0, self.head_dim()).copy_from(&self.phi);
        j.columns_mut(self.head_dim(), self.inner.param_dim())
            .copy_from(&self.inner.jacobian(&tail));
        j
    }
}
