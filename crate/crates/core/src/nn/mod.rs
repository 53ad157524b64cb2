//! Feed-forward networks with exact backpropagation.
//!
//! A [`Network`] is an ordered list of dense layers, each followed by its own
//! activation. Classifiers end in an identity layer so [`Network::forward`]
//! yields logits; the attack's generator also ends in identity and applies
//! its `tanh` squashing outside the network, which keeps the pre-`tanh`
//! images addressable. [`Network::backward`] differentiates
//! `sum(upstream ⊙ output)` with respect to every parameter and the input.

mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod softmax;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{check_gradients, random_network_suite, GradCheck};
pub use optim::{Milestone, OptimizerConfig, OptimizerKind, OptimizerState, Schedule};
pub use softmax::{log_softmax, softmax, softmax_jacobian, softmax_rows, P_MIN};

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

fn fresh_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative at pre-activation `z`; the relu subgradient at 0 is 0.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    /// Row-major `out_dim × in_dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Shape("layer dimensions must be positive".into()));
        }
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Shape(format!("layer {in_dim}->{out_dim} got {} weights and {} biases", weights.len(), bias.len())));
        }
        if !weights.iter().chain(&bias).all(|v| v.is_finite()) {
            return Err(Error::Validation("layer parameters must be finite".into()));
        }
        Ok(Self { in_dim, out_dim, weights, bias, activation })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero biases.
    pub fn glorot(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut SeededRng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| rng.uniform_range(-limit, limit)).collect();
        Self { in_dim, out_dim, weights, bias: vec![0.0; out_dim], activation }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// `x · Wᵀ + b` for a row-major batch.
    fn affine(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(batch * self.out_dim);
        for xb in x.chunks(self.in_dim) {
            for (w, b) in self.weights.chunks(self.in_dim).zip(&self.bias) {
                out.push(b + dot(w, xb));
            }
        }
        out
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-layer parameter gradients, mirroring the network's layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    pub fn flat(&self) -> Vec<f64> {
        self.slices().flatten().copied().collect()
    }

    pub fn l2_norm(&self) -> f64 {
        self.slices().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Activations recorded by [`Network::forward_cached`] for a later backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    revision: u64,
    batch: usize,
    /// Input to each layer (`inputs[0]` is the network input).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<DenseLayer>,
    revision: u64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl Network {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("a network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape(format!("layer {i} outputs {} but layer {} expects {}", pair[0].out_dim, i + 1, pair[1].in_dim)));
            }
        }
        Ok(Self { layers, revision: fresh_revision() })
    }

    /// Multi-layer perceptron with `dims = [input, hidden..., output]`.
    pub fn mlp(dims: &[usize], hidden: Activation, output: Activation, rng: &mut SeededRng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer::glorot(w[0], w[1], if i == last { output } else { hidden }, rng))
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn output_activation(&self) -> Activation {
        self.layers[self.layers.len() - 1].activation
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn param_slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    /// Mutable parameter buffers (weights then bias, per layer). Invalidates caches.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.revision = fresh_revision();
        self.layers.iter_mut().flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()]).collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.param_slices().flatten().copied().collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.param_count(), flat.len())));
        }
        let mut offset = 0;
        for slice in self.param_slices_mut() {
            let n = slice.len();
            slice.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        if x.shape().len() > 2 || x.cols() != self.input_dim() {
            return Err(Error::Shape(format!("network expects width {}, got shape {:?}", self.input_dim(), x.shape())));
        }
        x.ensure_finite("network input")?;
        Ok(x.rows())
    }

    /// Network output, `batch × output_dim`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let batch = self.check_input(x)?;
        let mut a = x.data().to_vec();
        for layer in &self.layers {
            a = layer.affine(&a, batch).into_iter().map(|v| layer.activation.apply(v)).collect();
        }
        finite_output(vec![batch, self.output_dim()], a)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let batch = self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.data().to_vec();
        for layer in &self.layers {
            let z = layer.affine(&a, batch);
            let next = z.iter().map(|&v| layer.activation.apply(v)).collect();
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z);
        }
        let out = finite_output(vec![batch, self.output_dim()], a)?;
        Ok((out, ForwardCache { revision: self.revision, batch, inputs, pre }))
    }

    /// Gradients of `sum(upstream ⊙ forward(x))` for the cached `x`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Tensor) -> Result<(Gradients, Tensor)> {
        if cache.revision != self.revision || cache.inputs.len() != self.layers.len() {
            return Err(Error::Validation("forward cache does not belong to this network state".into()));
        }
        if upstream.rows() != cache.batch || upstream.cols() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream shape {:?} does not match batch {} x {}",
                upstream.shape(),
                cache.batch,
                self.output_dim()
            )));
        }
        upstream.ensure_finite("upstream gradient")?;
        let batch = cache.batch;
        let top = &self.layers[self.layers.len() - 1];
        let mut delta: Vec<f64> =
            upstream.data().iter().zip(&cache.pre[self.layers.len() - 1]).map(|(&u, &z)| u * top.activation.derivative(z)).collect();
        let mut grads = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (n_in, n_out) = (layer.in_dim, layer.out_dim);
            let a_prev = &cache.inputs[l];
            let mut gw = vec![0.0; n_in * n_out];
            let mut gb = vec![0.0; n_out];
            let mut da = vec![0.0; batch * n_in];
            for b in 0..batch {
                let d_row = &delta[b * n_out..(b + 1) * n_out];
                let a_row = &a_prev[b * n_in..(b + 1) * n_in];
                let da_row = &mut da[b * n_in..(b + 1) * n_in];
                for (o, &d) in d_row.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let w_row = &layer.weights[o * n_in..(o + 1) * n_in];
                    let gw_row = &mut gw[o * n_in..(o + 1) * n_in];
                    for i in 0..n_in {
                        gw_row[i] += d * a_row[i];
                        da_row[i] += d * w_row[i];
                    }
                }
            }
            grads.push(LayerGrads { weights: gw, bias: gb });
            if l > 0 {
                let prev = &self.layers[l - 1];
                for (g, &z) in da.iter_mut().zip(&cache.pre[l - 1]) {
                    *g *= prev.activation.derivative(z);
                }
            }
            delta = da;
        }
        grads.reverse();
        let input_grad = finite_output(vec![batch, self.input_dim()], delta)?;
        Ok((Gradients { layers: grads }, input_grad))
    }

    /// Zero-valued gradients with this network's layout.
    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            layers: self.layers.iter().map(|l| LayerGrads { weights: vec![0.0; l.weights.len()], bias: vec![0.0; l.bias.len()] }).collect(),
        }
    }
}

fn finite_output(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(Tensor::from_parts(shape, data))
    } else {
        Err(Error::Training("network produced non-finite values".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_layer(w: Vec<f64>, b: Vec<f64>, act: Activation) -> Network {
        let n = b.len();
        let i = w.len() / n;
        Network::new(vec![DenseLayer::new(i, n, w, b, act).unwrap()]).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = one_layer(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], Activation::Identity);
        let x = Tensor::from_rows(&[[0.3, -0.7]]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), &[0.3, -0.7]);
    }

    #[test]
    fn single_relu_layer_hand_evaluation() {
        let net = one_layer(vec![1.0, 2.0, 0.0, -1.0], vec![0.5, 0.0], Activation::Relu);
        let x = Tensor::from_rows(&[[1.0, 1.0]]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), &[3.5, 0.0]);
    }

    #[test]
    fn relu_hidden_layer_hand_evaluation() {
        let hidden = DenseLayer::new(2, 2, vec![1.0, 2.0, 0.0, -1.0], vec![0.5, 0.0], Activation::Relu).unwrap();
        let out = DenseLayer::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], Activation::Identity).unwrap();
        let net = Network::new(vec![hidden, out]).unwrap();
        let x = Tensor::from_rows(&[[1.0, 1.0]]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), &[3.5, 0.0]);
    }

    #[test]
    fn identical_rows_identical_outputs() {
        let mut rng = SeededRng::new(1);
        let net = Network::mlp(&[3, 5, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.2, -0.3]; 3]).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.row(0), y.row(1));
        assert_eq!(y.row(1), y.row(2));
    }

    #[test]
    fn linear_input_grad_is_delta_times_w() {
        let net = one_layer(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![0.0, 0.0], Activation::Identity);
        let x = Tensor::from_rows(&[[1.0, 1.0, 1.0], [0.0, 2.0, -1.0]]).unwrap();
        let (_, cache) = net.forward_cached(&x).unwrap();
        let up = Tensor::from_rows(&[[1.0, 0.0], [0.5, -1.0]]).unwrap();
        let (_, gx) = net.backward(&cache, &up).unwrap();
        assert_eq!(gx.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(gx.row(1), &[0.5 - 4.0, 1.0 - 5.0, 1.5 - 6.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = SeededRng::new(2);
        let net = Network::mlp(&[4, 6, 3], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let x = Tensor::from_rows(&[[0.1, -0.2, 0.3, 0.9]]).unwrap();
        let (_, cache) = net.forward_cached(&x).unwrap();
        let (g, gx) = net.backward(&cache, &Tensor::zeros(vec![1, 3])).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = SeededRng::new(3);
        let mut net = Network::mlp(&[2, 3, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.2]]).unwrap();
        let (_, cache) = net.forward_cached(&x).unwrap();
        net.param_slices_mut()[0][0] += 0.1;
        let err = net.backward(&cache, &Tensor::zeros(vec![1, 2])).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let mut rng = SeededRng::new(4);
        let net = Network::mlp(&[2, 3], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.2, 0.3]]).unwrap();
        assert!(matches!(net.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn chain_mismatch_rejected() {
        let mut rng = SeededRng::new(5);
        let a = DenseLayer::glorot(2, 3, Activation::Relu, &mut rng);
        let b = DenseLayer::glorot(4, 1, Activation::Identity, &mut rng);
        assert!(Network::new(vec![a, b]).is_err());
    }

    #[test]
    fn param_count_sums_layers() {
        let mut rng = SeededRng::new(6);
        let net = Network::mlp(&[3, 4, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        assert_eq!(net.param_count(), 3 * 4 + 4 + 4 * 2 + 2);
        assert_eq!(net.flat_params().len(), net.param_count());
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = SeededRng::new(7);
        let l = DenseLayer::glorot(10, 6, Activation::Relu, &mut rng);
        let lim = (6.0f64 / 16.0).sqrt();
        assert!(l.weights().iter().all(|w| w.abs() <= lim));
        assert!(l.bias().iter().all(|&b| b == 0.0));
    }
}
