//! Extraction by distillation on surrogate data: the victim labels a fixed
//! pool of surrogate inputs with probabilities and a student is trained on
//! them with a temperature-scaled KL objective.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attack::{evaluate_agreement, Agreement};
use crate::data::{adapt_dataset, interpolate, Dataset, SyntheticSpec};
use crate::disagreement::{kl_temperature_grad, kl_temperature_loss, recover_logits};
use crate::error::{Error, Result};
use crate::nn::{Activation, Milestone, Network, OptimizerConfig, OptimizerState, Schedule};
use crate::oracle::{Oracle, Phase};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    /// One triangular cycle peaking at the base learning rate.
    Cyclic,
    /// ×0.2 at 30%, 60% and 80% of training.
    StepDecay,
}

impl LrSchedule {
    pub fn schedule(self) -> Schedule {
        match self {
            LrSchedule::Cyclic => Schedule::Triangular,
            LrSchedule::StepDecay => {
                Schedule::Milestones { milestones: [0.3, 0.6, 0.8].iter().map(|&at| Milestone { at, factor: 0.2 }).collect() }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Cyclic => "cyclic",
            LrSchedule::StepDecay => "step-decay",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub taus: Vec<f64>,
    pub schedules: Vec<LrSchedule>,
    pub epochs: usize,
    pub batch: usize,
    pub distinct_sample_cap: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub student_hidden: Vec<usize>,
    pub student_activation: Activation,
    pub lambda_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            taus: vec![1.0, 3.0, 5.0, 10.0],
            schedules: vec![LrSchedule::Cyclic, LrSchedule::StepDecay],
            epochs: 30,
            batch: 64,
            distinct_sample_cap: 2000,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            student_hidden: vec![64, 64],
            student_activation: Activation::Relu,
            lambda_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seed: 0,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.taus.is_empty() || self.taus.iter().any(|&t| !(t >= 1.0)) {
            return Err(Error::Config("temperatures must be non-empty and ≥ 1".into()));
        }
        if self.schedules.is_empty() {
            return Err(Error::Config("at least one schedule is required".into()));
        }
        if self.distinct_sample_cap == 0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("cap, batch and epochs must be positive".into()));
        }
        if self.lambda_grid.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Config("λ values must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DistillResult {
    pub student: Network,
    pub agreement: Agreement,
    pub tau: f64,
    pub schedule: LrSchedule,
    /// Distinct surrogate inputs sent to the victim.
    pub queried: usize,
}

/// Surrogate inputs in the victim's dimension, truncated to the sample cap.
fn prepare(surrogate: &Dataset, d: usize, cap: usize) -> Result<Tensor> {
    let adapted = if surrogate.dim() == d { surrogate.clone() } else { adapt_dataset(surrogate, d)? };
    Ok(adapted.take(cap).inputs)
}

/// Victim labels for the surrogate pool, queried once.
pub fn label_pool(oracle: &dyn Oracle, inputs: &Tensor) -> Result<Tensor> {
    oracle.query(inputs, Phase::Student)
}

/// Trains a student on `(inputs, victim probs)` with `τ²·KL` on recovered logits.
pub fn train_on_pool(inputs: &Tensor, probs: &Tensor, k: usize, cfg: &SurrogateConfig, tau: f64, schedule: LrSchedule) -> Result<Network> {
    let d = inputs.cols();
    let mut dims = vec![d];
    dims.extend_from_slice(&cfg.student_hidden);
    dims.push(k);
    let mut student = Network::mlp(&dims, cfg.student_activation, Activation::Identity, &mut SeededRng::derived(cfg.seed, 20))?;
    let opt_cfg = OptimizerConfig::sgd(cfg.learning_rate, cfg.momentum, cfg.weight_decay).with_schedule(schedule.schedule());
    let mut opt = OptimizerState::new(opt_cfg, &student)?;
    let targets: Vec<Vec<f64>> = probs.iter_rows().map(recover_logits).collect();
    let mut rng = SeededRng::derived(cfg.seed, 21);
    let n = inputs.rows();
    let batches_per_epoch = n.div_ceil(cfg.batch);
    let total = (cfg.epochs * batches_per_epoch) as f64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch) {
            opt.set_progress(step as f64 / total);
            step += 1;
            let x = inputs.select_rows(chunk);
            let (logits, cache) = student.forward_cached(&x)?;
            let b = chunk.len() as f64;
            let mut upstream = Vec::with_capacity(logits.len());
            for (row, &i) in logits.iter_rows().zip(chunk) {
                upstream.extend(kl_temperature_grad(&targets[i], row, tau)?.into_iter().map(|g| g / b));
            }
            let upstream = Tensor::new(logits.shape().to_vec(), upstream)?;
            let (grads, _) = student.backward(&cache, &upstream)?;
            opt.step(&mut student, &grads)?;
        }
    }
    Ok(student)
}

/// Mean `τ²·KL` of a student over a labelled pool.
pub fn pool_loss(student: &Network, inputs: &Tensor, probs: &Tensor, tau: f64) -> Result<f64> {
    let logits = student.forward(inputs)?;
    let mut total = 0.0;
    for (s, p) in logits.iter_rows().zip(probs.iter_rows()) {
        total += kl_temperature_loss(&recover_logits(p), s, tau)?;
    }
    Ok(total / inputs.rows().max(1) as f64)
}

/// Distills the victim on surrogate data, keeping the best test accuracy over
/// the configured temperatures and schedules. At most `min(cap, remaining budget)`
/// surrogate rows are queried, once each.
pub fn distill(oracle: &dyn Oracle, surrogate: &Dataset, test: &Dataset, cfg: &SurrogateConfig) -> Result<DistillResult> {
    cfg.validate()?;
    let meta = oracle.meta();
    if surrogate.is_empty() {
        return Err(Error::Validation("empty surrogate dataset".into()));
    }
    // A budget smaller than the cap shrinks the pool instead of failing.
    let remaining = oracle.ledger().remaining();
    if remaining == 0 {
        return Err(Error::BudgetExhausted { requested: 1, remaining: 0 });
    }
    let cap = cfg.distinct_sample_cap.min(usize::try_from(remaining).unwrap_or(usize::MAX));
    let inputs = prepare(surrogate, meta.d, cap)?;
    let probs = label_pool(oracle, &inputs)?;
    distill_pool(oracle, &inputs, &probs, test, cfg)
}

fn distill_pool(oracle: &dyn Oracle, inputs: &Tensor, probs: &Tensor, test: &Dataset, cfg: &SurrogateConfig) -> Result<DistillResult> {
    let mut best: Option<DistillResult> = None;
    for &schedule in &cfg.schedules {
        for &tau in &cfg.taus {
            let student = train_on_pool(inputs, probs, oracle.meta().k, cfg, tau, schedule)?;
            let agreement = evaluate_agreement(&student, oracle, test)?;
            if best.as_ref().is_none_or(|b| agreement.accuracy > b.agreement.accuracy) {
                best = Some(DistillResult { student, agreement, tau, schedule, queried: inputs.rows() });
            }
        }
    }
    Ok(best.expect("at least one τ and schedule"))
}

/// Accuracy of distillation on `(1−λ)·target + λ·surrogate` for each λ in the grid.
pub fn sweep_lambda(
    oracle: &dyn Oracle,
    target: &Dataset,
    surrogate: &Dataset,
    test: &Dataset,
    cfg: &SurrogateConfig,
) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    let d = oracle.meta().d;
    let n = cfg.distinct_sample_cap.min(target.len()).min(surrogate.len());
    let xt = prepare(target, d, n)?;
    let xs = prepare(surrogate, d, n)?;
    cfg.lambda_grid
        .iter()
        .map(|&lambda| {
            let mixed = interpolate(&xt, &xs, lambda)?;
            let probs = label_pool(oracle, &mixed)?;
            Ok((lambda, distill_pool(oracle, &mixed, &probs, test, cfg)?.agreement.accuracy))
        })
        .collect()
}

pub fn sweep_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("lambda,accuracy\n");
    for (l, a) in points {
        let _ = writeln!(out, "{l:.16e},{a:.16e}");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub surrogate: String,
    pub accuracy: f64,
    pub normalized_accuracy: f64,
    pub tau: f64,
    pub schedule: LrSchedule,
}

/// One distillation per surrogate; rows keep the input order.
pub fn benchmark_surrogates(
    oracle: &dyn Oracle,
    surrogates: &[Dataset],
    test: &Dataset,
    cfg: &SurrogateConfig,
) -> Result<Vec<BenchmarkRow>> {
    if surrogates.is_empty() {
        return Err(Error::Validation("no surrogate datasets".into()));
    }
    surrogates
        .iter()
        .map(|ds| {
            let r = distill(oracle, ds, test, cfg)?;
            Ok(BenchmarkRow {
                surrogate: ds.name.clone(),
                accuracy: r.agreement.accuracy,
                normalized_accuracy: r.agreement.normalized_accuracy(),
                tau: r.tau,
                schedule: r.schedule,
            })
        })
        .collect()
}

pub fn benchmark_csv(rows: &[BenchmarkRow]) -> String {
    let mut out = String::from("surrogate,accuracy,normalized_accuracy,tau,schedule\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.16e},{:.16e},{},{}", r.surrogate, r.accuracy, r.normalized_accuracy, r.tau, r.schedule.name());
    }
    out
}

/// The standard benchmark rows for a victim trained on `spec`: matched,
/// mismatched family, first half of the classes, a shape-adapted dataset of
/// the other desk task, and clipped standard-normal noise.
pub fn standard_surrogates(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Vec<Dataset>> {
    use crate::data::{generate, skew_classes, Family};
    let matched = generate(&SyntheticSpec { n, seed: seed ^ 0x5eed, ..spec.clone() })?;
    let mismatched = generate(&SyntheticSpec::new(Family::Blobs, n, spec.d, spec.k, 0.3, seed))?;
    let keep: Vec<usize> = (0..spec.k.div_ceil(2)).collect();
    let skewed = skew_classes(&generate(&SyntheticSpec { n: 2 * n, seed: seed ^ 0x5eed, ..spec.clone() })?, &keep)?;
    let other = if spec.family == Family::Spirals { SyntheticSpec::grid_digits(n, seed) } else { SyntheticSpec::spirals(n, seed) };
    let adapted = adapt_dataset(&generate(&other)?, spec.d)?;
    let noise = generate(&SyntheticSpec::new(Family::StandardNormalNoise, n, spec.d, spec.k, 1.0, seed))?;
    Ok(vec![matched, mismatched, skewed, adapted, noise])
}
