//! Zeroth-order gradient estimation by forward differences along random
//! directions on the unit sphere:
//!
//! ```text
//! ĝ(x) = (1/m) Σ_i  d · (f(x + ε u_i) − f(x)) / ε · u_i
//! ```
//!
//! `f(x)` is evaluated once and shared by the `m` directions, so one estimate
//! costs `m + 1` evaluations.

use serde::{Deserialize, Serialize};

use crate::disagreement::{attack_loss, attack_target, loss_with_logit_grads, LogitMode, LossKind};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::oracle::{Oracle, Phase};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FwdDiffConfig {
    /// Random directions per estimate.
    pub m: usize,
    /// Finite-difference step.
    pub eps: f64,
    /// Scale factor on each directional derivative; `None` means the dimension `d`.
    pub dim_scale: Option<f64>,
    /// Probability of negating each finished estimate.
    pub flip_probability: f64,
}

impl Default for FwdDiffConfig {
    fn default() -> Self {
        Self { m: 1, eps: 1e-3, dim_scale: None, flip_probability: 0.0 }
    }
}

impl FwdDiffConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config("flip probability must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn scale_for(&self, d: usize) -> f64 {
        self.dim_scale.unwrap_or(d as f64)
    }

    /// Metered queries per image.
    pub fn queries_per_image(&self) -> u64 {
        self.m as u64 + 1
    }
}

/// `m` i.i.d. directions uniform on the unit sphere in `R^d`.
pub fn sample_directions(m: usize, d: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| loop {
            let u = rng.normal_vec(d);
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-300 {
                break u.into_iter().map(|v| v / norm).collect();
            }
        })
        .collect()
}

/// Forward-differences estimate along the given directions.
pub fn forward_differences_along(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    directions: &[Vec<f64>],
    eps: f64,
    dim_scale: f64,
) -> Result<Vec<f64>> {
    let f0 = f(x)?;
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for u in directions {
        for ((p, &xi), &ui) in probe.iter_mut().zip(x).zip(u) {
            *p = xi + eps * ui;
        }
        let slope = dim_scale * (f(&probe)? - f0) / eps;
        for (g, &ui) in grad.iter_mut().zip(u) {
            *g += slope * ui;
        }
    }
    let m = directions.len() as f64;
    Ok(grad.into_iter().map(|g| g / m).collect())
}

/// Forward-differences estimate of `∇f(x)` with freshly sampled directions,
/// then sign corruption per `cfg.flip_probability`.
pub fn forward_differences(f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], cfg: &FwdDiffConfig, rng: &mut SeededRng) -> Result<Vec<f64>> {
    cfg.validate()?;
    let dirs = sample_directions(cfg.m, x.len(), rng);
    let g = forward_differences_along(f, x, &dirs, cfg.eps, cfg.scale_for(x.len()))?;
    Ok(corrupt_sign(g, cfg.flip_probability, rng))
}

/// Returns `-g` with probability `p`, otherwise `g`.
pub fn corrupt_sign(g: Vec<f64>, p: f64, rng: &mut SeededRng) -> Vec<f64> {
    if p > 0.0 && rng.bernoulli(p) {
        g.into_iter().map(|v| -v).collect()
    } else {
        g
    }
}

fn tanh_rows(x: &[f64]) -> impl Iterator<Item = f64> + '_ {
    x.iter().map(|v| v.tanh())
}

/// Per-row attack losses for student and victim outputs on the same images.
fn batch_losses(
    oracle: &dyn Oracle,
    student: &Network,
    images: &Tensor,
    probs: &Tensor,
    kind: LossKind,
    mode: LogitMode,
) -> Result<Vec<f64>> {
    let student_logits = student.forward(images)?;
    let true_logits = match (kind, mode) {
        (LossKind::L1, LogitMode::TrueDiagnostic) => Some(oracle.diagnostic_true_logits(images)?.into_inner()),
        _ => None,
    };
    Ok((0..images.rows())
        .map(|r| {
            let target = attack_target(kind, mode, probs.row(r), true_logits.as_ref().map(|t| t.row(r)));
            attack_loss(kind, mode, &target, student_logits.row(r)).0
        })
        .collect())
}

/// Estimates `∇_p L(V(tanh p), S(tanh p))` for every row of the pre-`tanh`
/// batch `x_pre`, charging `(m+1)·B` generator-phase queries in one atomic
/// batch. Every queried point lies strictly inside `(-1, 1)^d`.
pub fn estimate_input_grad(
    oracle: &dyn Oracle,
    student: &Network,
    x_pre: &Tensor,
    kind: LossKind,
    mode: LogitMode,
    cfg: &FwdDiffConfig,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    cfg.validate()?;
    let (b, d) = (x_pre.rows(), x_pre.cols());
    let per = cfg.m + 1;
    let mut directions = Vec::with_capacity(b);
    let mut points = Vec::with_capacity(b * per * d);
    for row in x_pre.iter_rows() {
        let dirs = sample_directions(cfg.m, d, rng);
        points.extend(tanh_rows(row));
        for u in &dirs {
            points.extend(row.iter().zip(u).map(|(p, ui)| (p + cfg.eps * ui).tanh()));
        }
        directions.push(dirs);
    }
    let images = Tensor::new(vec![b * per, d], points)?;
    let probs = oracle.query(&images, Phase::Generator)?;
    let losses = batch_losses(oracle, student, &images, &probs, kind, mode)?;

    let scale = cfg.scale_for(d);
    let mut out = Vec::with_capacity(b * d);
    for (r, dirs) in directions.iter().enumerate() {
        let f = &losses[r * per..(r + 1) * per];
        let mut g = vec![0.0; d];
        for (i, u) in dirs.iter().enumerate() {
            let slope = scale * (f[i + 1] - f[0]) / cfg.eps;
            for (gj, uj) in g.iter_mut().zip(u) {
                *gj += slope * uj;
            }
        }
        let g: Vec<f64> = g.into_iter().map(|v| v / cfg.m as f64).collect();
        out.extend(corrupt_sign(g, cfg.flip_probability, rng));
    }
    Tensor::new(vec![b, d], out)
}

/// White-box `∇_p` of the same per-row loss (diagnostic; refused in strict mode).
pub fn true_input_grad(oracle: &dyn Oracle, student: &Network, x_pre: &Tensor, kind: LossKind, mode: LogitMode) -> Result<Tensor> {
    let images = x_pre.map(f64::tanh);
    let grad_x = true_image_grad(oracle, student, &images, kind, mode)?;
    let data = grad_x.data().iter().zip(x_pre.data()).map(|(g, p)| g * (1.0 - p.tanh().powi(2))).collect();
    Tensor::new(x_pre.shape().to_vec(), data)
}

/// White-box `∇_x L(V(x), S(x))` per row, through both networks.
pub fn true_image_grad(oracle: &dyn Oracle, student: &Network, images: &Tensor, kind: LossKind, mode: LogitMode) -> Result<Tensor> {
    let (s_logits, cache) = student.forward_cached(images)?;
    let mut ds_all = vec![0.0; s_logits.len()];
    let mut victim_side = |v_logits: &Tensor| -> Result<Tensor> {
        let mut dv_all = Vec::with_capacity(v_logits.len());
        for r in 0..v_logits.rows() {
            let (_, dv, ds) = loss_with_logit_grads(kind, mode, v_logits.row(r), s_logits.row(r));
            dv_all.extend(dv);
            let k = ds.len();
            ds_all[r * k..(r + 1) * k].copy_from_slice(&ds);
        }
        Tensor::new(v_logits.shape().to_vec(), dv_all)
    };
    let from_victim = oracle.diagnostic_true_input_grad(images, &mut victim_side)?.into_inner();
    let upstream = Tensor::new(s_logits.shape().to_vec(), ds_all)?;
    let (_, from_student) = student.backward(&cache, &upstream)?;
    let data = from_victim.data().iter().zip(from_student.data()).map(|(a, b)| a + b).collect();
    Tensor::new(images.shape().to_vec(), data)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
