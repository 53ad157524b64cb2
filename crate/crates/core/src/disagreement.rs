//! Disagreement between student and victim: logit recovery from probabilities,
//! the ℓ1 logit loss and the (temperature-scaled) KL divergence, each with
//! analytic gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax, softmax, softmax_jacobian, P_MIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    Kl,
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(LossKind::L1),
            "kl" => Ok(LossKind::Kl),
            _ => Err(Error::Config(format!("unknown loss '{s}' (expected l1 or kl)"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L1 => "l1",
            LossKind::Kl => "kl",
        })
    }
}

/// How the attacker turns victim outputs into logits for the ℓ1 loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitMode {
    /// Mean-centred log-probabilities, compared with mean-centred student logits.
    Recovered,
    /// Raw log-probabilities, compared with raw student logits.
    LogProb,
    /// The victim's true logits (white-box; diagnostics only).
    TrueDiagnostic,
}

impl FromStr for LogitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recovered" => Ok(LogitMode::Recovered),
            "logprob" | "log_prob" => Ok(LogitMode::LogProb),
            "true" | "true_diagnostic" => Ok(LogitMode::TrueDiagnostic),
            _ => Err(Error::Config(format!("unknown logit mode '{s}'"))),
        }
    }
}

impl fmt::Display for LogitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogitMode::Recovered => "recovered",
            LogitMode::LogProb => "logprob",
            LogitMode::TrueDiagnostic => "true",
        })
    }
}

impl LogitMode {
    /// Whether student logits are mean-centred before the ℓ1 comparison.
    pub fn centers_student(self) -> bool {
        matches!(self, LogitMode::Recovered)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mean_center(v: &[f64]) -> Vec<f64> {
    let m = mean(v);
    v.iter().map(|x| x - m).collect()
}

/// `log max(p, P_MIN)` per class.
pub fn clipped_log(probs: &[f64]) -> Vec<f64> {
    probs.iter().map(|&p| p.max(P_MIN).ln()).collect()
}

/// Logits up to the per-example constant: centred clipped log-probabilities.
pub fn recover_logits(probs: &[f64]) -> Vec<f64> {
    mean_center(&clipped_log(probs))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Σ |v_i − s_i|`.
pub fn l1_loss(v: &[f64], s: &[f64]) -> f64 {
    v.iter().zip(s).map(|(a, b)| (a - b).abs()).sum()
}

/// Subgradient of [`l1_loss`] with respect to `s`: `−sign(v − s)`, `sign(0) = 0`.
pub fn l1_grad(v: &[f64], s: &[f64]) -> Vec<f64> {
    v.iter().zip(s).map(|(a, b)| -sign(a - b)).collect()
}

/// ℓ1 loss against optionally centred student logits, with gradients with
/// respect to both raw logit vectors: `(loss, ∂/∂v, ∂/∂s)`.
///
/// With centring on, both sides are centred so that the loss depends on the
/// logits only through their deviations from the mean.
pub fn l1_with_grads(v: &[f64], s: &[f64], center: bool) -> (f64, Vec<f64>, Vec<f64>) {
    if !center {
        let ds = l1_grad(v, s);
        let dv = ds.iter().map(|g| -g).collect();
        return (l1_loss(v, s), dv, ds);
    }
    let (vc, sc) = (mean_center(v), mean_center(s));
    let ds = mean_center(&l1_grad(&vc, &sc));
    let dv = ds.iter().map(|g| -g).collect();
    (l1_loss(&vc, &sc), dv, ds)
}

/// `Σ V_i log(V_i / S_i)`, with `S` floored at `P_MIN` and `0·log 0 = 0`.
pub fn kl_loss(pv: &[f64], ps: &[f64]) -> f64 {
    pv.iter().zip(ps).filter(|(v, _)| **v > 0.0).map(|(&v, &s)| v * (v.max(P_MIN).ln() - s.max(P_MIN).ln())).sum()
}

/// Gradient of [`kl_loss`] with respect to the student logits: `S − V`.
pub fn kl_grad_student_logits(pv: &[f64], ps: &[f64]) -> Vec<f64> {
    ps.iter().zip(pv).map(|(s, v)| s - v).collect()
}

/// KL from logits on both sides: `(loss, ∂/∂v, ∂/∂s)`.
pub fn kl_with_grads(v: &[f64], s: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (pv, ps) = (softmax(v), softmax(s));
    let (lv, ls) = (log_softmax(v), log_softmax(s));
    let loss = pv.iter().zip(lv.iter().zip(&ls)).map(|(p, (a, b))| p * (a - b)).sum();
    let diff: Vec<f64> = lv.iter().zip(&ls).map(|(a, b)| a - b).collect();
    let jac = softmax_jacobian(&pv).expect("softmax output is a probability vector");
    let k = v.len();
    let dv = (0..k).map(|i| (0..k).map(|j| jac.get(i, j) * diff[j]).sum()).collect();
    (loss, dv, kl_grad_student_logits(&pv, &ps))
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau >= 1.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be >= 1, got {tau}")))
    }
}

fn scaled(v: &[f64], tau: f64) -> Vec<f64> {
    v.iter().map(|x| x / tau).collect()
}

/// `τ² · KL(softmax(v/τ) ‖ softmax(s/τ))`.
pub fn kl_temperature_loss(v: &[f64], s: &[f64], tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    let (pv, ps) = (softmax(&scaled(v, tau)), softmax(&scaled(s, tau)));
    Ok(tau * tau * kl_loss(&pv, &ps))
}

/// Gradient of [`kl_temperature_loss`] with respect to `s`: `τ (S_τ − V_τ)`.
pub fn kl_temperature_grad(v: &[f64], s: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    let (pv, ps) = (softmax(&scaled(v, tau)), softmax(&scaled(s, tau)));
    Ok(kl_grad_student_logits(&pv, &ps).into_iter().map(|g| tau * g).collect())
}

/// Loss from true logits on both sides with gradients `(loss, ∂/∂v, ∂/∂s)`,
/// matching what [`attack_loss`] computes from the victim's probabilities.
pub fn loss_with_logit_grads(kind: LossKind, mode: LogitMode, v: &[f64], s: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    match (kind, mode) {
        (LossKind::Kl, _) => kl_with_grads(v, s),
        (LossKind::L1, LogitMode::Recovered) => l1_with_grads(v, s, true),
        (LossKind::L1, LogitMode::TrueDiagnostic) => l1_with_grads(v, s, false),
        (LossKind::L1, LogitMode::LogProb) => {
            let t = log_softmax(v);
            let ds = l1_grad(&t, s);
            let total: f64 = ds.iter().sum();
            let dv = ds.iter().zip(softmax(v)).map(|(g, p)| -g + p * total).collect();
            (l1_loss(&t, s), dv, ds)
        }
    }
}

/// Per-example attack loss and its gradient with respect to the raw student
/// logits. `target` is victim logits (per the logit mode) for ℓ1, or victim
/// probabilities for KL.
pub fn attack_loss(kind: LossKind, mode: LogitMode, target: &[f64], student_logits: &[f64]) -> (f64, Vec<f64>) {
    match kind {
        LossKind::L1 if mode.centers_student() => {
            let (loss, _, ds) = l1_with_grads(target, student_logits, true);
            (loss, ds)
        }
        LossKind::L1 => (l1_loss(target, student_logits), l1_grad(target, student_logits)),
        LossKind::Kl => {
            let ps = softmax(student_logits);
            (kl_loss(target, &ps), kl_grad_student_logits(target, &ps))
        }
    }
}

/// Victim-side target for [`attack_loss`] from one probability row (or true
/// logits in diagnostic mode).
pub fn attack_target(kind: LossKind, mode: LogitMode, probs: &[f64], true_logits: Option<&[f64]>) -> Vec<f64> {
    match (kind, mode) {
        (LossKind::Kl, _) => probs.to_vec(),
        (LossKind::L1, LogitMode::Recovered) => recover_logits(probs),
        (LossKind::L1, LogitMode::LogProb) => clipped_log(probs),
        (LossKind::L1, LogitMode::TrueDiagnostic) => true_logits.expect("true logits required in diagnostic mode").to_vec(),
    }
}
