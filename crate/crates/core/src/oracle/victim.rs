//! Training the victim classifier.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{generate, generate_split, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nn::{argmax, log_softmax, softmax, Activation, Checkpoint, Network, OptimizerConfig, OptimizerState, Schedule};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 200,
            batch_size: 64,
            optimizer: OptimizerConfig::sgd(0.05, 0.9, 2e-3).with_schedule(Schedule::step_decay(&[0.5], 0.1)),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VictimModel {
    pub network: Network,
    pub train_spec: SyntheticSpec,
    pub test_accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct VictimFile {
    train_spec: SyntheticSpec,
    test_accuracy: f64,
    network: Checkpoint,
}

impl VictimModel {
    /// Held-out split of the victim's own task.
    pub fn test_set(&self) -> Result<Dataset> {
        generate_split(&self.train_spec, Split::Test)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&VictimFile {
            train_spec: self.train_spec.clone(),
            test_accuracy: self.test_accuracy,
            network: Checkpoint::from_network(&self.network),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: VictimFile = serde_json::from_str(text)?;
        Ok(Self { network: f.network.to_network()?, train_spec: f.train_spec, test_accuracy: f.test_accuracy })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Argmax predictions of a classifier over a batch.
pub fn predict(net: &Network, inputs: &Tensor) -> Result<Vec<usize>> {
    Ok(net.forward(inputs)?.iter_rows().map(argmax).collect())
}

pub fn accuracy(net: &Network, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Validation("accuracy of an empty dataset".into()));
    }
    let pred = predict(net, &ds.inputs)?;
    Ok(pred.iter().zip(&ds.labels).filter(|(p, l)| p == l).count() as f64 / ds.len() as f64)
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let b = logits.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &y) in logits.iter_rows().zip(labels) {
        loss -= log_softmax(row)[y];
        for (i, p) in softmax(row).into_iter().enumerate() {
            grad.push((p - if i == y { 1.0 } else { 0.0 }) / b);
        }
    }
    (loss / b, Tensor::from_parts(logits.shape().to_vec(), grad))
}

/// Minibatch cross-entropy training of an existing classifier.
pub fn fit_classifier(net: &mut Network, ds: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), net)?;
    let mut rng = SeededRng::derived(cfg.seed, 0x5eed_7a1e);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut last_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        opt.set_progress(epoch as f64 / cfg.epochs as f64);
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = ds.inputs.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
            let (logits, cache) = net.forward_cached(&x).map_err(|e| diverged(epoch, step, e))?;
            let (loss, grad) = cross_entropy(&logits, &y);
            if !loss.is_finite() {
                return Err(Error::Training(format!("loss {loss} at epoch {epoch}, step {step}")));
            }
            total += loss * chunk.len() as f64;
            let (grads, _) = net.backward(&cache, &grad)?;
            opt.step(net, &grads).map_err(|e| diverged(epoch, step, e))?;
        }
        last_loss = total / ds.len() as f64;
    }
    Ok(last_loss)
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::Training(msg) => Error::Training(format!("{msg} at epoch {epoch}, step {step}")),
        other => other,
    }
}

/// Trains a relu MLP on the spec's training split and scores it on its test split.
pub fn train_victim(spec: &SyntheticSpec, cfg: &TrainConfig) -> Result<VictimModel> {
    let train = generate(spec)?;
    let mut dims = vec![spec.d];
    dims.extend(&cfg.hidden);
    dims.push(spec.k);
    let mut rng = SeededRng::derived(cfg.seed, 0x1417);
    let mut network = Network::mlp(&dims, Activation::Relu, Activation::Identity, &mut rng)?;
    fit_classifier(&mut network, &train, cfg)?;
    let test = generate_split(spec, Split::Test)?;
    let test_accuracy = accuracy(&network, &test)?;
    Ok(VictimModel { network, train_spec: spec.clone(), test_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Family;

    #[test]
    fn separable_blobs_are_learned() {
        let spec = SyntheticSpec::new(Family::Blobs, 400, 4, 3, 0.05, 3);
        let cfg = TrainConfig { hidden: vec![16], epochs: 30, ..TrainConfig::default() };
        let v = train_victim(&spec, &cfg).unwrap();
        assert!(v.test_accuracy >= 0.99, "accuracy {}", v.test_accuracy);
    }

    #[test]
    fn training_is_deterministic() {
        let spec = SyntheticSpec::new(Family::Blobs, 100, 3, 2, 0.2, 1);
        let cfg = TrainConfig { hidden: vec![8], epochs: 5, ..TrainConfig::default() };
        let a = train_victim(&spec, &cfg).unwrap();
        let b = train_victim(&spec, &cfg).unwrap();
        assert_eq!(a.network.flat_params(), b.network.flat_params());
    }

    #[test]
    fn divergence_is_reported() {
        let spec = SyntheticSpec::new(Family::Blobs, 100, 3, 2, 0.2, 1);
        let cfg = TrainConfig { hidden: vec![8], epochs: 50, optimizer: OptimizerConfig::sgd(1e3, 0.0, 0.5), ..TrainConfig::default() };
        let r = train_victim(&spec, &cfg);
        assert!(matches!(r, Err(Error::Training(_))), "{:?}", r.map(|v| v.test_accuracy));
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = Tensor::from_rows(&[[0.0, 0.0]]).unwrap();
        let (loss, g) = cross_entropy(&logits, &[1]);
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g.data(), &[0.5, -0.5]);
    }
}
