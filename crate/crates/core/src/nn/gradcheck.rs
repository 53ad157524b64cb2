//! Central finite-difference check of [`Network::backward`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Network;

/// Worst disagreement found by [`check_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over entries whose absolute error exceeds `abs_floor`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

impl GradCheck {
    pub fn within(&self, rel: f64) -> bool {
        self.max_rel_error < rel
    }
}

fn objective(net: &Network, x: &Tensor, upstream: &Tensor) -> Result<f64> {
    Ok(net.forward(x)?.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum())
}

fn compare(analytic: f64, numeric: f64, abs_floor: f64, out: &mut GradCheck) {
    let abs = (analytic - numeric).abs();
    out.max_abs_error = out.max_abs_error.max(abs);
    out.entries += 1;
    if abs > abs_floor {
        out.max_rel_error = out.max_rel_error.max(abs / analytic.abs().max(numeric.abs()));
    }
}

/// Compares every parameter and input gradient of `sum(upstream ⊙ net(x))`
/// against central differences with step `h`.
pub fn check_gradients(net: &Network, x: &Tensor, upstream: &Tensor, h: f64, abs_floor: f64) -> Result<GradCheck> {
    if !(h > 0.0) {
        return Err(Error::Validation("step must be positive".into()));
    }
    let (_, cache) = net.forward_cached(x)?;
    let (grads, input_grad) = net.backward(&cache, upstream)?;
    let mut out = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, entries: 0 };

    let params = net.flat_params();
    let mut probe = net.clone();
    for (i, g) in grads.flat().into_iter().enumerate() {
        let mut p = params.clone();
        p[i] += h;
        probe.set_flat_params(&p)?;
        let up = objective(&probe, x, upstream)?;
        p[i] -= 2.0 * h;
        probe.set_flat_params(&p)?;
        let down = objective(&probe, x, upstream)?;
        compare(g, (up - down) / (2.0 * h), abs_floor, &mut out);
    }

    let mut xs = x.data().to_vec();
    for i in 0..xs.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let up = objective(net, &Tensor::new(x.shape().to_vec(), xs.clone())?, upstream)?;
        xs[i] = orig - h;
        let down = objective(net, &Tensor::new(x.shape().to_vec(), xs.clone())?, upstream)?;
        xs[i] = orig;
        compare(input_grad.data()[i], (up - down) / (2.0 * h), abs_floor, &mut out);
    }
    Ok(out)
}

/// Checks `count` random networks of at most three layers and sixteen units
/// with mixed activations, returning the worst result.
pub fn random_network_suite(count: usize, seed: u64) -> Result<GradCheck> {
    use super::Activation;
    use crate::rng::SeededRng;

    let mut rng = SeededRng::new(seed);
    let mut worst = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, entries: 0 };
    let acts = [Activation::Identity, Activation::Relu, Activation::Tanh];
    for _ in 0..count {
        let depth = 1 + rng.below(3);
        let dims: Vec<usize> = (0..=depth).map(|_| 1 + rng.below(16)).collect();
        let layers = dims
            .windows(2)
            .map(|w| {
                let mut layer = super::DenseLayer::glorot(w[0], w[1], acts[rng.below(3)], &mut rng);
                // Non-zero biases so relu kinks are not hit systematically at x = 0.
                let bias: Vec<f64> = rng.normal_vec(w[1]).into_iter().map(|b| 0.1 * b).collect();
                layer = super::DenseLayer::new(w[0], w[1], layer.weights().to_vec(), bias, layer.activation())?;
                Ok(layer)
            })
            .collect::<Result<Vec<_>>>()?;
        let net = Network::new(layers)?;
        let batch = 1 + rng.below(4);
        let x = Tensor::new(vec![batch, dims[0]], rng.normal_vec(batch * dims[0]))?;
        let up = Tensor::new(vec![batch, net.output_dim()], rng.normal_vec(batch * net.output_dim()))?;
        let r = check_gradients(&net, &x, &up, 1e-5, 1e-9)?;
        worst.max_rel_error = worst.max_rel_error.max(r.max_rel_error);
        worst.max_abs_error = worst.max_abs_error.max(r.max_abs_error);
        worst.entries += r.entries;
    }
    Ok(worst)
}
