//! SGD with momentum and Adam, with learning-rate schedules expressed as
//! fractions of the total run.

use serde::{Deserialize, Serialize};

use super::{Gradients, Network};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

/// Multiply the learning rate by `factor` once progress reaches `at`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Milestone {
    pub at: f64,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Schedule {
    Constant,
    /// Step decay at fractions of the run.
    Milestones {
        milestones: Vec<Milestone>,
    },
    /// One triangular cycle: linear ramp up to the base rate at mid-run, then down.
    Triangular,
}

impl Schedule {
    /// `×factor` at each of the given fractions.
    pub fn step_decay(fractions: &[f64], factor: f64) -> Self {
        Schedule::Milestones { milestones: fractions.iter().map(|&at| Milestone { at, factor }).collect() }
    }

    pub fn multiplier(&self, progress: f64) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Milestones { milestones } => milestones.iter().filter(|m| progress >= m.at).map(|m| m.factor).product(),
            Schedule::Triangular => (1.0 - (2.0 * progress - 1.0).abs()).max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::sgd(0.1, 0.9, 5e-4)
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            momentum,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::Constant,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::Adam, momentum: 0.0, weight_decay: 0.0, ..Self::sgd(learning_rate, 0.0, 0.0) }
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer configuration plus per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
    progress: f64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, net: &Network) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = net.param_slices().map(|s| vec![0.0; s.len()]).collect();
        let second = if config.kind == OptimizerKind::Adam { zeros.clone() } else { Vec::new() };
        Ok(Self { config, first: zeros, second, steps: 0, progress: 0.0 })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Fraction of the run completed, used by the schedule.
    pub fn set_progress(&mut self, progress: f64) {
        self.progress = progress.clamp(0.0, 1.0);
    }

    pub fn effective_lr(&self) -> f64 {
        self.config.learning_rate * self.config.schedule.multiplier(self.progress)
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        let shapes_match = grads.layers.len() * 2 == self.first.len() && grads.slices().zip(&self.first).all(|(g, m)| g.len() == m.len());
        if !shapes_match {
            return Err(Error::Validation("gradient layout does not match optimizer buffers".into()));
        }
        if !grads.slices().flatten().all(|g| g.is_finite()) {
            return Err(Error::Training("non-finite gradient".into()));
        }
        self.steps += 1;
        let lr = self.effective_lr();
        let cfg = &self.config;
        let t = self.steps as i32;
        let params = net.param_slices_mut();
        for (idx, (theta, g)) in params.into_iter().zip(grads.slices()).enumerate() {
            let m = &mut self.first[idx];
            match cfg.kind {
                OptimizerKind::SgdMomentum => {
                    for i in 0..theta.len() {
                        let gi = g[i] + cfg.weight_decay * theta[i];
                        m[i] = cfg.momentum * m[i] + gi;
                        theta[i] -= lr * m[i];
                    }
                }
                OptimizerKind::Adam => {
                    let v = &mut self.second[idx];
                    let bc1 = 1.0 - cfg.beta1.powi(t);
                    let bc2 = 1.0 - cfg.beta2.powi(t);
                    for i in 0..theta.len() {
                        let gi = g[i] + cfg.weight_decay * theta[i];
                        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        theta[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseLayer};

    fn scalar_net(theta: f64) -> Network {
        Network::new(vec![DenseLayer::new(1, 1, vec![theta], vec![0.0], Activation::Identity).unwrap()]).unwrap()
    }

    fn scalar_grads(g: f64) -> Gradients {
        Gradients { layers: vec![super::super::LayerGrads { weights: vec![g], bias: vec![0.0] }] }
    }

    #[test]
    fn plain_sgd_step() {
        let mut net = scalar_net(1.0);
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.1, 0.0, 0.0), &net).unwrap();
        opt.step(&mut net, &scalar_grads(2.0)).unwrap();
        assert!((net.flat_params()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for cfg in [OptimizerConfig::sgd(0.1, 0.9, 0.0), OptimizerConfig::adam(0.01)] {
            let mut net = scalar_net(0.7);
            let mut opt = OptimizerState::new(cfg, &net).unwrap();
            for _ in 0..3 {
                opt.step(&mut net, &scalar_grads(0.0)).unwrap();
            }
            assert_eq!(net.flat_params(), vec![0.7, 0.0]);
        }
    }

    /// Independent scalar Adam used as the reference trace.
    fn reference_adam(theta0: f64, grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        let mut out = Vec::new();
        for (t, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            th -= lr * mh / (vh.sqrt() + eps);
            out.push(th);
        }
        out
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let mut rng = crate::rng::SeededRng::new(99);
        let grads: Vec<f64> = (0..50).map(|_| rng.normal()).collect();
        let expect = reference_adam(0.3, &grads, 0.01);
        let mut net = scalar_net(0.3);
        let mut opt = OptimizerState::new(OptimizerConfig::adam(0.01), &net).unwrap();
        for (g, e) in grads.iter().zip(expect) {
            opt.step(&mut net, &scalar_grads(*g)).unwrap();
            assert!((net.flat_params()[0] - e).abs() < 1e-14);
        }
    }

    #[test]
    fn weight_decay_adds_to_gradient() {
        let mut net = scalar_net(2.0);
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.1, 0.0, 0.5), &net).unwrap();
        opt.step(&mut net, &scalar_grads(0.0)).unwrap();
        assert!((net.flat_params()[0] - (2.0 - 0.1 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn milestone_schedule() {
        let s = Schedule::step_decay(&[0.1, 0.3, 0.5], 0.3);
        assert_eq!(s.multiplier(0.0), 1.0);
        assert!((s.multiplier(0.2) - 0.3).abs() < 1e-15);
        assert!((s.multiplier(0.6) - 0.027).abs() < 1e-15);
        let mut net = scalar_net(0.0);
        let mut opt = OptimizerState::new(OptimizerConfig::adam(5e-4).with_schedule(s), &net).unwrap();
        opt.set_progress(0.35);
        assert!((opt.effective_lr() - 5e-4 * 0.09).abs() < 1e-18);
        opt.step(&mut net, &scalar_grads(1.0)).unwrap();
    }

    #[test]
    fn triangular_peaks_mid_run() {
        let s = Schedule::Triangular;
        assert_eq!(s.multiplier(0.5), 1.0);
        assert!((s.multiplier(0.25) - 0.5).abs() < 1e-15);
        assert_eq!(s.multiplier(1.0), 0.0);
    }

    #[test]
    fn layout_mismatch_rejected() {
        let mut net = scalar_net(1.0);
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.1, 0.0, 0.0), &net).unwrap();
        let bad = Gradients { layers: vec![] };
        assert!(matches!(opt.step(&mut net, &bad), Err(Error::Validation(_))));
    }
}
