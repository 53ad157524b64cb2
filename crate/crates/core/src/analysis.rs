//! Numerical checks of the softmax-Jacobian lemmas, the gradient-vanishing
//! hypothesis for KL versus ℓ1, and the logit-recovery error study.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attack::MetricsRecord;
use crate::disagreement::{kl_loss, kl_with_grads, mean, recover_logits, LogitMode, LossKind};
use crate::error::{Error, Result};
use crate::nn::{log_softmax, softmax, softmax_jacobian, Network, OptimizerConfig, OptimizerState, Schedule};
use crate::oracle::Oracle;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::zo::true_image_grad;

pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub check: String,
    pub status: Status,
    pub trials: usize,
    pub violations: usize,
    /// Extremal values observed.
    pub witness: BTreeMap<String, f64>,
    /// First few violations, for debugging.
    pub failures: Vec<String>,
    /// Per-checkpoint series where relevant.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub series: BTreeMap<String, Vec<f64>>,
}

impl Report {
    fn new(check: &str, trials: usize) -> Self {
        Self {
            check: check.into(),
            status: Status::Pass,
            trials,
            violations: 0,
            witness: BTreeMap::new(),
            failures: Vec::new(),
            series: BTreeMap::new(),
        }
    }

    fn violation(&mut self, msg: String) {
        self.violations += 1;
        self.status = Status::Fail;
        if self.failures.len() < 10 {
            self.failures.push(msg);
        }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the matrix whose columns are the eigenvectors.
pub fn jacobi_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let n = a.rows();
    if a.shape() != [n, n] {
        return Err(Error::Shape(format!("expected a square matrix, got {:?}", a.shape())));
    }
    let mut m: Vec<f64> = a.data().to_vec();
    for i in 0..n {
        for j in 0..i {
            if (m[i * n + j] - m[j * n + i]).abs() > 1e-12 * (1.0 + m[i * n + j].abs()) {
                return Err(Error::Validation("matrix is not symmetric".into()));
            }
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    for _ in 0..100 {
        if off(&m) < 1e-12 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if off(&m) >= 1e-12 {
        return Err(Error::Domain("Jacobi iteration did not converge".into()));
    }
    Ok(((0..n).map(|i| m[i * n + i]).collect(), Tensor::new(vec![n, n], v)?))
}

fn random_logits(rng: &mut SeededRng, k: usize) -> Vec<f64> {
    // Mix of scales so near-uniform and near-one-hot cases both appear.
    let scale = [0.1, 1.0, 3.0, 10.0, 30.0][rng.below(5)];
    rng.normal_vec(k).into_iter().map(|v| v * scale).collect()
}

fn matvec(m: &Tensor, z: &[f64]) -> Vec<f64> {
    m.iter_rows().map(|r| r.iter().zip(z).map(|(a, b)| a * b).sum()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Eigenvalues of the softmax Jacobian lie in `[0, 1]` and its trace is `1 − Σ S_i²`.
pub fn verify_lemma1(trials: usize, k_min: usize, k_max: usize, seed: u64) -> Result<Report> {
    if trials == 0 || k_min < 2 || k_max < k_min {
        return Err(Error::Validation("need trials ≥ 1 and 2 ≤ k_min ≤ k_max".into()));
    }
    let mut rng = SeededRng::new(seed);
    let mut rep = Report::new("lemma1", trials);
    let (mut lo, mut hi, mut trace_err) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for t in 0..trials {
        let k = k_min + rng.below(k_max - k_min + 1);
        let logits = random_logits(&mut rng, k);
        let s = softmax(&logits);
        let (eig, _) = jacobi_eigen(&softmax_jacobian(&s)?)?;
        let expected = 1.0 - s.iter().map(|p| p * p).sum::<f64>();
        let err = (eig.iter().sum::<f64>() - expected).abs();
        trace_err = trace_err.max(err);
        for &e in &eig {
            lo = lo.min(e);
            hi = hi.max(e);
            if !(-TOLERANCE..=1.0 + TOLERANCE).contains(&e) {
                rep.violation(format!("trial {t}: eigenvalue {e} for K={k}"));
            }
        }
        if err > TOLERANCE {
            rep.violation(format!("trial {t}: trace error {err}"));
        }
    }
    rep.witness.insert("min_eigenvalue".into(), lo);
    rep.witness.insert("max_eigenvalue".into(), hi);
    rep.witness.insert("max_trace_error".into(), trace_err);
    Ok(rep)
}

/// `‖J Z‖ ≤ ‖Z‖` for the softmax Jacobian `J` and arbitrary `Z`.
pub fn verify_lemma2(trials: usize, k_min: usize, k_max: usize, seed: u64) -> Result<Report> {
    if trials == 0 || k_min < 2 || k_max < k_min {
        return Err(Error::Validation("need trials ≥ 1 and 2 ≤ k_min ≤ k_max".into()));
    }
    let mut rng = SeededRng::new(seed);
    let mut rep = Report::new("lemma2", trials);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let k = k_min + rng.below(k_max - k_min + 1);
        let j = softmax_jacobian(&softmax(&random_logits(&mut rng, k)))?;
        let zscale = 10f64.powf(rng.uniform_range(-3.0, 3.0));
        let z: Vec<f64> = rng.normal_vec(k).into_iter().map(|v| v * zscale).collect();
        let (lhs, rhs) = (norm(&matvec(&j, &z)), norm(&z));
        if rhs > 0.0 {
            worst = worst.max(lhs / rhs);
        }
        if lhs > rhs + TOLERANCE {
            rep.violation(format!("trial {t}: ‖JZ‖={lhs} > ‖Z‖={rhs}"));
        }
    }
    rep.witness.insert("max_ratio".into(), worst);
    Ok(rep)
}

fn jacobian_distance(s: &[f64], v: &[f64]) -> Result<(f64, f64)> {
    let (ps, pv) = (softmax(s), softmax(v));
    let js = softmax_jacobian(&ps)?;
    let jv = softmax_jacobian(&pv)?;
    let dist = norm(&js.data().iter().zip(jv.data()).map(|(a, b)| a - b).collect::<Vec<_>>());
    let eps: Vec<f64> = ps.iter().zip(&pv).map(|(a, b)| a - b).collect();
    let k = s.len();
    let mut bound = 0.0;
    for i in 0..k {
        for j in 0..k {
            bound += if i == j {
                eps[i].abs() * (1.0 - 2.0 * pv[i]).abs() + eps[i] * eps[i]
            } else {
                pv[i] * eps[j].abs() + pv[j] * eps[i].abs() + (eps[i] * eps[j]).abs()
            };
        }
    }
    Ok((dist, bound))
}

#[derive(Debug, Clone)]
pub struct Lemma3Config {
    pub steps: usize,
    pub checkpoints: usize,
    pub learning_rate: f64,
}

impl Default for Lemma3Config {
    fn default() -> Self {
        Self { steps: 2000, checkpoints: 20, learning_rate: 1e-2 }
    }
}

/// Trains `student` toward the victim on `probes` and tracks the mean
/// Frobenius distance between the two softmax Jacobians.
pub fn verify_lemma3(oracle: &dyn Oracle, mut student: Network, probes: &Tensor, cfg: &Lemma3Config) -> Result<Report> {
    let v = oracle.diagnostic_true_logits(probes)?.into_inner();
    let pv = Tensor::from_parts(v.shape().to_vec(), v.iter_rows().flat_map(softmax).collect());
    let decay = Schedule::step_decay(&[0.25, 0.5, 0.75], 0.3);
    let mut opt = OptimizerState::new(OptimizerConfig::adam(cfg.learning_rate).with_schedule(decay), &student)?;
    let mut rep = Report::new("lemma3", probes.rows());
    let n = probes.rows() as f64;
    let every = (cfg.steps / cfg.checkpoints.max(1)).max(1);
    let (mut dists, mut bounds, mut losses) = (Vec::new(), Vec::new(), Vec::new());
    for step in 0..=cfg.steps {
        let (s, cache) = student.forward_cached(probes)?;
        if step % every == 0 || step == cfg.steps {
            let (mut d, mut b, mut l) = (0.0, 0.0, 0.0);
            for (sr, (vr, pr)) in s.iter_rows().zip(v.iter_rows().zip(pv.iter_rows())) {
                let (dist, bound) = jacobian_distance(sr, vr)?;
                if dist > bound + TOLERANCE {
                    rep.violation(format!("step {step}: distance {dist} exceeds perturbation bound {bound}"));
                }
                d += dist / n;
                b += bound / n;
                l += kl_loss(pr, &softmax(sr)) / n;
            }
            dists.push(d);
            bounds.push(b);
            losses.push(l);
        }
        if step == cfg.steps {
            break;
        }
        let mut up = Vec::with_capacity(s.len());
        for (sr, vr) in s.iter_rows().zip(v.iter_rows()) {
            up.extend(kl_with_grads(vr, sr).2.into_iter().map(|g| g / n));
        }
        let (grads, _) = student.backward(&cache, &Tensor::new(s.shape().to_vec(), up)?)?;
        opt.set_progress(step as f64 / cfg.steps as f64);
        opt.step(&mut student, &grads)?;
    }
    let first = dists[0];
    let last = *dists.last().expect("at least one checkpoint");
    let decreasing = dists.windows(2).filter(|w| w[1] < w[0]).count() as f64 / (dists.len() - 1).max(1) as f64;
    rep.witness.insert("initial_distance".into(), first);
    rep.witness.insert("final_distance".into(), last);
    rep.witness.insert("decreasing_fraction".into(), decreasing);
    rep.witness.insert("initial_kl".into(), losses[0]);
    rep.witness.insert("final_kl".into(), *losses.last().unwrap());
    rep.series.insert("distance".into(), dists);
    rep.series.insert("bound".into(), bounds);
    rep.series.insert("kl".into(), losses.clone());
    if rep.status == Status::Pass {
        if first == 0.0 {
            // Already converged.
        } else if losses.last().unwrap() > &(0.1 * losses[0]) {
            rep.status = Status::Inconclusive;
        } else if !(last < 0.1 * first && decreasing >= 0.8) {
            rep.status = Status::Fail;
            rep.failures.push(format!("distance {first} → {last}, decreasing fraction {decreasing}"));
        }
    }
    Ok(rep)
}

/// Gradient norms of both losses at one checkpoint, with the first-order bound
/// `‖Σ δ_i (∂v_i/∂x − ∂s_i/∂x)‖`, `δ_i = V_i/S_i − 1`, averaged over probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientNorms {
    pub l1: f64,
    pub kl: f64,
    pub kl_bound: f64,
}

impl GradientNorms {
    pub fn ratio(&self) -> f64 {
        if self.l1 > 0.0 {
            self.kl / self.l1
        } else {
            0.0
        }
    }
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    t.iter_rows().map(norm).collect()
}

pub fn gradient_norms(oracle: &dyn Oracle, student: &Network, probes: &Tensor) -> Result<GradientNorms> {
    let n = probes.rows() as f64;
    let l1 = true_image_grad(oracle, student, probes, LossKind::L1, LogitMode::Recovered)?;
    let kl = true_image_grad(oracle, student, probes, LossKind::Kl, LogitMode::Recovered)?;
    // Σ δ_i (∂v_i/∂x − ∂s_i/∂x) = (∂v/∂x)ᵀδ − (∂s/∂x)ᵀδ
    let (s_logits, cache) = student.forward_cached(probes)?;
    let v_logits = oracle.diagnostic_true_logits(probes)?.into_inner();
    let mut delta = Vec::with_capacity(s_logits.len());
    for (sr, vr) in s_logits.iter_rows().zip(v_logits.iter_rows()) {
        let (ps, pv) = (softmax(sr), softmax(vr));
        delta.extend(ps.iter().zip(&pv).map(|(s, v)| v / s.max(1e-300) - 1.0));
    }
    let delta = Tensor::new(s_logits.shape().to_vec(), delta)?;
    let mut through_victim = |_: &Tensor| Ok(delta.clone());
    let dv = oracle.diagnostic_true_input_grad(probes, &mut through_victim)?.into_inner();
    let (_, ds) = student.backward(&cache, &delta)?;
    let diff = Tensor::new(dv.shape().to_vec(), dv.data().iter().zip(ds.data()).map(|(a, b)| a - b).collect())?;
    let mean_of = |v: Vec<f64>| v.iter().sum::<f64>() / n;
    Ok(GradientNorms { l1: mean_of(row_norms(&l1)), kl: mean_of(row_norms(&kl)), kl_bound: mean_of(row_norms(&diff)) })
}

fn hypothesis1_status(rep: &mut Report, ratios: &[f64]) {
    match (ratios.first(), ratios.last()) {
        (Some(&a), Some(&b)) if ratios.len() >= 2 && a.is_finite() && b.is_finite() && a > 0.0 => {
            rep.witness.insert("initial_ratio".into(), a);
            rep.witness.insert("final_ratio".into(), b);
            rep.witness.insert("relative".into(), b / a);
            rep.status = if b < 0.5 * a { Status::Pass } else { Status::Fail };
        }
        _ => rep.status = Status::Inconclusive,
    }
}

/// Ratio `‖∇ₓL_KL‖ / ‖∇ₓL_ℓ1‖` across student checkpoints on a fixed probe
/// batch; passes when the final ratio is below half the initial one.
pub fn hypothesis1_probe(oracle: &dyn Oracle, checkpoints: &[Network], probes: &Tensor) -> Result<Report> {
    let mut rep = Report::new("hypothesis1", checkpoints.len());
    let mut ratios = Vec::new();
    let (mut kl, mut l1, mut bounds) = (Vec::new(), Vec::new(), Vec::new());
    let mut bound_violations = 0usize;
    for net in checkpoints {
        let g = gradient_norms(oracle, net, probes)?;
        if g.kl > g.kl_bound + 1e-6 {
            bound_violations += 1;
        }
        ratios.push(g.ratio());
        kl.push(g.kl);
        l1.push(g.l1);
        bounds.push(g.kl_bound);
    }
    hypothesis1_status(&mut rep, &ratios);
    rep.witness.insert("bound_violations".into(), bound_violations as f64);
    rep.series.insert("ratio".into(), ratios);
    rep.series.insert("kl".into(), kl);
    rep.series.insert("l1".into(), l1);
    rep.series.insert("kl_bound".into(), bounds);
    Ok(rep)
}

/// The same ratio test from gradient norms recorded during an attack.
pub fn hypothesis1_from_metrics(records: &[MetricsRecord]) -> Report {
    let ratios: Vec<f64> = records
        .iter()
        .filter_map(|r| match (r.grad_norm_kl, r.grad_norm_l1) {
            (Some(kl), Some(l1)) if l1 > 0.0 => Some(kl / l1),
            _ => None,
        })
        .collect();
    let mut rep = Report::new("hypothesis1", ratios.len());
    hypothesis1_status(&mut rep, &ratios);
    rep.series.insert("ratio".into(), ratios);
    rep
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitErrorRow {
    pub victim: String,
    /// Mean over probes and classes of the true logits.
    pub mtl: f64,
    /// Mean over probes of `|mean_i v_i(x)|`.
    pub mean_abs_mtl: f64,
    pub mae_mean_corrected: f64,
    pub mae_log_prob: f64,
}

impl LogitErrorRow {
    /// Mean-corrected error equals the per-example absolute logit mean and is
    /// far below the log-probability error.
    pub fn holds(&self) -> bool {
        (self.mae_mean_corrected - self.mean_abs_mtl).abs() <= TOLERANCE && self.mae_mean_corrected < 0.01 * self.mae_log_prob
    }
}

/// Reconstruction error of victim logits from probabilities, by mean
/// correction and by raw log-probabilities.
pub fn logit_error_study(victims: &[(String, &dyn Oracle, &Tensor)]) -> Result<Vec<LogitErrorRow>> {
    if victims.is_empty() {
        return Err(Error::Validation("no victims".into()));
    }
    victims
        .iter()
        .map(|(name, oracle, probes)| {
            let v = oracle.diagnostic_true_logits(probes)?.into_inner();
            let (mut mtl, mut abs_mtl, mut mc, mut lp) = (0.0, 0.0, 0.0, 0.0);
            for row in v.iter_rows() {
                let k = row.len() as f64;
                let m = mean(row);
                mtl += m;
                abs_mtl += m.abs();
                let probs = softmax(row);
                mc += recover_logits(&probs).iter().zip(row).map(|(a, b)| (a - b).abs()).sum::<f64>() / k;
                lp += log_softmax(row).iter().zip(row).map(|(a, b)| (a - b).abs()).sum::<f64>() / k;
            }
            let n = v.rows() as f64;
            Ok(LogitErrorRow {
                victim: name.clone(),
                mtl: mtl / n,
                mean_abs_mtl: abs_mtl / n,
                mae_mean_corrected: mc / n,
                mae_log_prob: lp / n,
            })
        })
        .collect()
}

/// `max |recover_logits(softmax(v)) − (v − mean v)|` over random logit vectors
/// with entries drawn from `N(0, 3²)`, a range where no probability reaches
/// the clipping floor.
pub fn recovery_identity_error(trials: usize, k_max: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let k = 2 + rng.below(k_max.max(2) - 1);
        let v: Vec<f64> = rng.normal_vec(k).into_iter().map(|x| x * 3.0).collect();
        let m = mean(&v);
        for (r, x) in recover_logits(&softmax(&v)).iter().zip(&v) {
            worst = worst.max((r - (x - m)).abs());
        }
    }
    worst
}
