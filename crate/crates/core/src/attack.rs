//! Data-free extraction loop: a generator searches for inputs on which the
//! student and the black-box victim disagree, and the student is trained to
//! agree with the victim on them.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::disagreement::{attack_loss, attack_target, LogitMode, LossKind};
use crate::error::{Error, Result};
use crate::nn::{argmax, Activation, Checkpoint, DenseLayer, Milestone, Network, OptimizerConfig, OptimizerState, Schedule};
use crate::oracle::{Oracle, Phase, QueryLedger};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::zo::{estimate_input_grad, FwdDiffConfig};

fn default_decay() -> Schedule {
    Schedule::Milestones { milestones: [0.1, 0.3, 0.5].iter().map(|&at| Milestone { at, factor: 0.3 }).collect() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub budget: u64,
    pub n_g: usize,
    pub n_s: usize,
    pub batch: usize,
    pub latent_dim: usize,
    pub fwd: FwdDiffConfig,
    pub loss: LossKind,
    pub logit_mode: LogitMode,
    pub student_hidden: Vec<usize>,
    pub student_activation: Activation,
    pub generator_hidden: Vec<usize>,
    pub student_optimizer: OptimizerConfig,
    pub generator_optimizer: OptimizerConfig,
    pub eval_every: u64,
    /// Record white-box gradient norms with every evaluation (non-strict oracles only).
    pub diagnostics: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            budget: 200_000,
            n_g: 1,
            n_s: 5,
            batch: 64,
            latent_dim: 8,
            fwd: FwdDiffConfig::default(),
            loss: LossKind::L1,
            logit_mode: LogitMode::Recovered,
            student_hidden: vec![64, 64],
            student_activation: Activation::Relu,
            generator_hidden: vec![64, 64],
            student_optimizer: OptimizerConfig::sgd(0.1, 0.9, 5e-4).with_schedule(default_decay()),
            generator_optimizer: OptimizerConfig::adam(5e-4).with_schedule(default_decay()),
            eval_every: 10_000,
            diagnostics: false,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("budget must be positive".into()));
        }
        if self.n_s == 0 {
            return Err(Error::Config("n_s must be at least 1".into()));
        }
        if self.batch == 0 || self.latent_dim == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch, latent_dim and eval_every must be positive".into()));
        }
        self.fwd.validate()?;
        self.student_optimizer.validate()?;
        self.generator_optimizer.validate()
    }

    pub fn generator_step_cost(&self) -> u64 {
        self.fwd.queries_per_image() * self.batch as u64
    }

    pub fn student_step_cost(&self) -> u64 {
        self.batch as u64
    }

    pub fn iteration_cost(&self) -> u64 {
        self.n_g as u64 * self.generator_step_cost() + self.n_s as u64 * self.student_step_cost()
    }

    /// Queries a complete run spends: full iterations, then a final partial
    /// one if its generator steps and at least one student step fit.
    pub fn expected_queries(&self) -> u64 {
        let c = self.iteration_cost();
        let full = self.budget / c;
        let rest = self.budget - full * c;
        let gen = self.n_g as u64 * self.generator_step_cost();
        let b = self.student_step_cost();
        let partial = if rest >= gen + b { gen + (rest - gen) / b * b } else { 0 };
        full * c + partial
    }
}

/// Fraction of the budget spent on student training.
pub fn query_ratio(n_s: usize, n_g: usize, m: usize) -> Result<f64> {
    let denom = n_s + (m + 1) * n_g;
    if denom == 0 {
        return Err(Error::Validation("query ratio undefined for n_s = n_g = 0".into()));
    }
    Ok(n_s as f64 / denom as f64)
}

/// Latent-to-image network. The wrapped network ends in an identity layer;
/// `tanh` is applied here so zeroth-order estimates can work on pre-`tanh` images.
#[derive(Debug, Clone)]
pub struct Generator {
    net: Network,
}

impl Generator {
    pub fn new(latent_dim: usize, hidden: &[usize], d: usize, rng: &mut SeededRng) -> Result<Self> {
        let mut dims = vec![latent_dim];
        dims.extend_from_slice(hidden);
        dims.push(d);
        Ok(Self { net: Network::mlp(&dims, Activation::Relu, Activation::Identity, rng)? })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn latent_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn pre_images(&self, z: &Tensor) -> Result<Tensor> {
        self.net.forward(z)
    }

    pub fn images(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.pre_images(z)?.map(f64::tanh))
    }

    /// Checkpoint with the output layer recorded as `tanh`.
    pub fn to_json(&self) -> Result<String> {
        let mut ckpt = Checkpoint::from_network(&self.net);
        if let Some(last) = ckpt.layers.last_mut() {
            last.activation = Activation::Tanh;
        }
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net = Network::from_json(text)?;
        if net.output_activation() != Activation::Tanh {
            return Err(Error::Validation("generator checkpoint must end in tanh".into()));
        }
        let mut layers = net.layers().to_vec();
        let last = layers.pop().expect("network has at least one layer");
        layers.push(DenseLayer::new(last.in_dim(), last.out_dim(), last.weights().to_vec(), last.bias().to_vec(), Activation::Identity)?);
        Ok(Self { net: Network::new(layers)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub queries_used: u64,
    pub accuracy: f64,
    pub fidelity: f64,
    /// Mean student-step loss since the previous record.
    pub loss_mean: Option<f64>,
    pub grad_norm_l1: Option<f64>,
    pub grad_norm_kl: Option<f64>,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "queries_used,accuracy,fidelity,loss_mean,grad_norm_l1,grad_norm_kl,wall_ms";

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.queries_used,
            fmt_float(r.accuracy),
            fmt_float(r.fidelity),
            fmt_opt(r.loss_mean),
            fmt_opt(r.grad_norm_l1),
            fmt_opt(r.grad_norm_kl),
            r.wall_ms
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub accuracy: f64,
    pub fidelity: f64,
    pub victim_accuracy: f64,
}

impl Agreement {
    pub fn normalized_accuracy(&self) -> f64 {
        if self.victim_accuracy > 0.0 {
            self.accuracy / self.victim_accuracy
        } else {
            0.0
        }
    }
}

/// Student accuracy and agreement with the victim on `test`, using unmetered
/// evaluation queries.
pub fn evaluate_agreement(student: &Network, oracle: &dyn Oracle, test: &Dataset) -> Result<Agreement> {
    if test.is_empty() {
        return Err(Error::Validation("empty test set".into()));
    }
    let victim = oracle.query(&test.inputs, Phase::Evaluation)?;
    let logits = student.forward(&test.inputs)?;
    let (mut acc, mut fid, mut vacc) = (0usize, 0usize, 0usize);
    for ((s, v), &y) in logits.iter_rows().zip(victim.iter_rows()).zip(&test.labels) {
        let (ps, pv) = (argmax(s), argmax(v));
        acc += usize::from(ps == y);
        fid += usize::from(ps == pv);
        vacc += usize::from(pv == y);
    }
    let n = test.len() as f64;
    Ok(Agreement { accuracy: acc as f64 / n, fidelity: fid as f64 / n, victim_accuracy: vacc as f64 / n })
}

pub struct AttackState<'a> {
    pub generator: Generator,
    pub student: Network,
    oracle: &'a dyn Oracle,
    gen_opt: OptimizerState,
    student_opt: OptimizerState,
    pub metrics: Vec<MetricsRecord>,
    rng: SeededRng,
    cfg: AttackConfig,
    /// Oracle ledger when the attack started; usage is counted from here.
    base: QueryLedger,
}

impl<'a> AttackState<'a> {
    pub fn new(oracle: &'a dyn Oracle, cfg: &AttackConfig) -> Result<Self> {
        let meta = oracle.meta();
        let mut dims = vec![meta.d];
        dims.extend_from_slice(&cfg.student_hidden);
        dims.push(meta.k);
        let student = Network::mlp(&dims, cfg.student_activation, Activation::Identity, &mut SeededRng::derived(cfg.seed, 2))?;
        Self::with_student(oracle, cfg, student)
    }

    /// Starts from a given student, e.g. one distilled on a surrogate set.
    pub fn with_student(oracle: &'a dyn Oracle, cfg: &AttackConfig, student: Network) -> Result<Self> {
        cfg.validate()?;
        let meta = oracle.meta();
        if student.input_dim() != meta.d || student.output_dim() != meta.k {
            return Err(Error::Shape(format!(
                "student is {}→{}, victim is {}→{}",
                student.input_dim(),
                student.output_dim(),
                meta.d,
                meta.k
            )));
        }
        if oracle.is_strict() && (cfg.logit_mode == LogitMode::TrueDiagnostic || cfg.diagnostics) {
            return Err(Error::Policy("white-box diagnostics are disabled on a strict oracle".into()));
        }
        let generator = Generator::new(cfg.latent_dim, &cfg.generator_hidden, meta.d, &mut SeededRng::derived(cfg.seed, 1))?;
        Ok(Self {
            gen_opt: OptimizerState::new(cfg.generator_optimizer.clone(), generator.network())?,
            student_opt: OptimizerState::new(cfg.student_optimizer.clone(), &student)?,
            generator,
            student,
            oracle,
            metrics: Vec::new(),
            rng: SeededRng::derived(cfg.seed, 3),
            cfg: cfg.clone(),
            base: oracle.ledger(),
        })
    }

    pub fn config(&self) -> &AttackConfig {
        &self.cfg
    }

    /// Mean attack loss on the images of `z`, from unmetered evaluation queries.
    pub fn batch_loss(&self, z: &Tensor) -> Result<f64> {
        let x = self.generator.images(z)?;
        let probs = self.oracle.query(&x, Phase::Evaluation)?;
        let logits = self.student.forward(&x)?;
        let (kind, mode) = (self.cfg.loss, self.cfg.logit_mode);
        let true_logits = match mode {
            LogitMode::TrueDiagnostic => Some(self.oracle.diagnostic_true_logits(&x)?.into_inner()),
            _ => None,
        };
        let total: f64 = (0..x.rows())
            .map(|r| {
                let target = attack_target(kind, mode, probs.row(r), true_logits.as_ref().map(|t| t.row(r)));
                attack_loss(kind, mode, &target, logits.row(r)).0
            })
            .sum();
        Ok(total / x.rows() as f64)
    }

    pub fn latent(&mut self) -> Result<Tensor> {
        let (b, l) = (self.cfg.batch, self.cfg.latent_dim);
        Tensor::matrix(b, l, self.rng.normal_vec(b * l))
    }

    /// Queries spent since this state was created, as (total, generator, student).
    pub fn spent(&self) -> (u64, u64, u64) {
        let now = self.oracle.ledger();
        let g = now.used_generator_phase - self.base.used_generator_phase;
        let s = now.used_student_phase - self.base.used_student_phase;
        (g + s, g, s)
    }

    /// What is left of this attack's budget, never more than the oracle will answer.
    pub fn remaining(&self) -> u64 {
        self.cfg.budget.saturating_sub(self.spent().0).min(self.oracle.ledger().remaining())
    }

    fn set_progress(&mut self) {
        let frac = self.spent().0 as f64 / self.cfg.budget as f64;
        self.gen_opt.set_progress(frac);
        self.student_opt.set_progress(frac);
    }

    /// One generator update: estimate `∇_p L` by forward differences through
    /// the victim and ascend `L` by back-propagating it through the generator.
    pub fn generator_step(&mut self) -> Result<()> {
        let z = self.latent()?;
        self.generator_step_on(&z)
    }

    /// [`Self::generator_step`] on a given latent batch.
    pub fn generator_step_on(&mut self, z: &Tensor) -> Result<()> {
        self.set_progress();
        let (pre, cache) = self.generator.net.forward_cached(z)?;
        let grad = estimate_input_grad(self.oracle, &self.student, &pre, self.cfg.loss, self.cfg.logit_mode, &self.cfg.fwd, &mut self.rng)?;
        let scale = -1.0 / z.rows() as f64;
        let upstream = grad.map(|g| g * scale);
        let (grads, _) = self.generator.net.backward(&cache, &upstream)?;
        self.gen_opt.step(&mut self.generator.net, &grads)
    }

    /// One student update on a fresh generator batch. Returns the batch loss.
    pub fn student_step(&mut self) -> Result<f64> {
        let z = self.latent()?;
        self.student_step_on(&z)
    }

    /// [`Self::student_step`] on a given latent batch.
    pub fn student_step_on(&mut self, z: &Tensor) -> Result<f64> {
        self.set_progress();
        let x = self.generator.images(z)?;
        let probs = self.oracle.query(&x, Phase::Student)?;
        let (kind, mode) = (self.cfg.loss, self.cfg.logit_mode);
        let true_logits = match mode {
            LogitMode::TrueDiagnostic => Some(self.oracle.diagnostic_true_logits(&x)?.into_inner()),
            _ => None,
        };
        let (logits, cache) = self.student.forward_cached(&x)?;
        let b = x.rows() as f64;
        let mut total = 0.0;
        let mut upstream = Vec::with_capacity(logits.len());
        for r in 0..x.rows() {
            let target = attack_target(kind, mode, probs.row(r), true_logits.as_ref().map(|t| t.row(r)));
            let (loss, grad) = attack_loss(kind, mode, &target, logits.row(r));
            total += loss;
            upstream.extend(grad.into_iter().map(|g| g / b));
        }
        let upstream = Tensor::new(logits.shape().to_vec(), upstream)?;
        let (grads, _) = self.student.backward(&cache, &upstream)?;
        self.student_opt.step(&mut self.student, &grads)?;
        Ok(total / b)
    }

    /// Mean white-box `‖∇_x L‖` for the ℓ1 and KL losses on the generator's
    /// images of a fixed latent batch.
    pub fn gradient_norms(&self, z: &Tensor) -> Result<(f64, f64)> {
        let g = crate::analysis::gradient_norms(self.oracle, &self.student, &self.generator.images(z)?)?;
        Ok((g.l1, g.kl))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSummary {
    pub config: AttackConfig,
    pub d: usize,
    pub k: usize,
    pub queries_used: u64,
    pub generator_queries: u64,
    pub student_queries: u64,
    pub iterations: u64,
    pub query_ratio: f64,
    pub accuracy: f64,
    pub fidelity: f64,
    pub victim_accuracy: f64,
    pub normalized_accuracy: f64,
    pub wall_ms: u64,
}

pub struct AttackOutcome {
    pub student: Network,
    pub generator: Generator,
    pub metrics: Vec<MetricsRecord>,
    pub summary: AttackSummary,
}

impl AttackOutcome {
    /// Writes `metrics.csv`, `summary.json`, `student.json` and `generator.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), metrics_csv(&self.metrics))?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary)?)?;
        self.student.save(&dir.join("student.json"))?;
        std::fs::write(dir.join("generator.json"), self.generator.to_json()?)?;
        Ok(())
    }
}

pub fn run_attack(oracle: &dyn Oracle, test: &Dataset, cfg: &AttackConfig) -> Result<AttackOutcome> {
    run_state(AttackState::new(oracle, cfg)?, test)
}

pub fn run_attack_from(oracle: &dyn Oracle, test: &Dataset, cfg: &AttackConfig, student: Network) -> Result<AttackOutcome> {
    run_state(AttackState::with_student(oracle, cfg, student)?, test)
}

fn run_state(mut state: AttackState<'_>, test: &Dataset) -> Result<AttackOutcome> {
    let cfg = state.cfg.clone();
    let oracle = state.oracle;
    let start = Instant::now();
    let probe_z = {
        let mut rng = SeededRng::derived(cfg.seed, 4);
        Tensor::matrix(cfg.batch, cfg.latent_dim, rng.normal_vec(cfg.batch * cfg.latent_dim))?
    };
    let mut losses: Vec<f64> = Vec::new();

    let record = |state: &mut AttackState<'_>, losses: &mut Vec<f64>| -> Result<()> {
        let used = state.spent().0;
        let agreement = evaluate_agreement(&state.student, oracle, test)?;
        let (l1, kl) = if cfg.diagnostics {
            let (a, b) = state.gradient_norms(&probe_z)?;
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        let loss_mean = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
        losses.clear();
        state.metrics.push(MetricsRecord {
            queries_used: used,
            accuracy: agreement.accuracy,
            fidelity: agreement.fidelity,
            loss_mean,
            grad_norm_l1: l1,
            grad_norm_kl: kl,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        Ok(())
    };

    record(&mut state, &mut losses)?;
    let mut next_eval = cfg.eval_every;
    let gen_cost = cfg.n_g as u64 * cfg.generator_step_cost();
    let s_cost = cfg.student_step_cost();
    let mut iterations = 0u64;

    let mut after_step = |state: &mut AttackState<'_>, losses: &mut Vec<f64>| -> Result<()> {
        let used = state.spent().0;
        if used >= next_eval {
            record(state, losses)?;
            while next_eval <= used {
                next_eval += cfg.eval_every;
            }
        }
        Ok(())
    };

    loop {
        if state.remaining() < gen_cost + s_cost {
            break;
        }
        for _ in 0..cfg.n_g {
            state.generator_step()?;
            after_step(&mut state, &mut losses)?;
        }
        for _ in 0..cfg.n_s {
            if state.remaining() < s_cost {
                break;
            }
            losses.push(state.student_step()?);
            after_step(&mut state, &mut losses)?;
        }
        iterations += 1;
    }

    let (used, generator_queries, student_queries) = state.spent();
    if state.metrics.last().map(|r| r.queries_used) != Some(used) {
        record(&mut state, &mut losses)?;
    }
    let last = evaluate_agreement(&state.student, oracle, test)?;
    let summary = AttackSummary {
        d: oracle.meta().d,
        k: oracle.meta().k,
        queries_used: used,
        generator_queries,
        student_queries,
        iterations,
        query_ratio: query_ratio(cfg.n_s, cfg.n_g, cfg.fwd.m)?,
        accuracy: last.accuracy,
        fidelity: last.fidelity,
        victim_accuracy: last.victim_accuracy,
        normalized_accuracy: last.normalized_accuracy(),
        wall_ms: start.elapsed().as_millis() as u64,
        config: cfg,
    };
    Ok(AttackOutcome { student: state.student, generator: state.generator, metrics: state.metrics, summary })
}
