//! Softmax and its Jacobian.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability floor applied before any logarithm.
pub const P_MIN: f64 = 1e-12;

/// Max-subtracted softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log softmax(logits)`, computed without forming the probabilities.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

/// Row-wise softmax of a `batch × K` tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let data = logits.iter_rows().flat_map(softmax).collect();
    Tensor::from_parts(vec![logits.rows(), logits.cols()], data)
}

/// Checks that `probs` is a probability vector (non-negative, sums to 1).
pub fn validate_probabilities(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Validation("empty probability vector".into()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
        return Err(Error::Validation("probabilities must lie in [0, 1]".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

/// `J[i][j] = ∂S_i/∂s_j = S_i(δ_ij − S_j)` as a `K × K` tensor.
pub fn softmax_jacobian(probs: &[f64]) -> Result<Tensor> {
    validate_probabilities(probs)?;
    let k = probs.len();
    let mut data = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            data[i * k + j] = if i == j { probs[i] * (1.0 - probs[i]) } else { -probs[i] * probs[j] };
        }
    }
    Ok(Tensor::from_parts(vec![k, k], data))
}
