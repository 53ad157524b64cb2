//! Versioned JSON checkpoints for [`Network`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, DenseLayer, Network};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub activation: Activation,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub input_dim: usize,
    pub output_dim: usize,
    pub layers: Vec<LayerRecord>,
}

impl Checkpoint {
    pub fn from_network(net: &Network) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| LayerRecord {
                activation: l.activation(),
                weights: l.weights().chunks(l.in_dim()).map(<[f64]>::to_vec).collect(),
                bias: l.bias().to_vec(),
            })
            .collect();
        Self { version: CHECKPOINT_VERSION, input_dim: net.input_dim(), output_dim: net.output_dim(), layers }
    }

    pub fn to_network(&self) -> Result<Network> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!("unsupported checkpoint version {}", self.version)));
        }
        let layers = self
            .layers
            .iter()
            .map(|rec| {
                let out = rec.weights.len();
                let inp = rec.weights.first().map_or(0, Vec::len);
                if rec.weights.iter().any(|r| r.len() != inp) {
                    return Err(Error::Shape("ragged weight matrix in checkpoint".into()));
                }
                DenseLayer::new(inp, out, rec.weights.concat(), rec.bias.clone(), rec.activation)
            })
            .collect::<Result<Vec<_>>>()?;
        let net = Network::new(layers)?;
        if net.input_dim() != self.input_dim || net.output_dim() != self.output_dim {
            return Err(Error::Shape("checkpoint header disagrees with its layers".into()));
        }
        Ok(net)
    }
}

impl Network {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint::from_network(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<Checkpoint>(text)?.to_network()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
