//! The victim behind a query-metered, probability-only interface.
//!
//! The attack is written against the [`Oracle`] trait alone. [`LocalOracle`]
//! serves an in-process victim; [`RemoteOracle`] speaks the newline-delimited
//! JSON protocol in [`protocol`] to an [`OracleServer`]. In strict mode the
//! diagnostic methods, the only routes to true logits or gradients, refuse.

mod ledger;
mod local;
pub mod protocol;
mod remote;
mod server;
mod victim;

pub use ledger::{Phase, QueryLedger};
pub use local::LocalOracle;
pub use remote::RemoteOracle;
pub use server::OracleServer;
pub use victim::{accuracy, cross_entropy, fit_classifier, predict, train_victim, TrainConfig, VictimModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Public facts about an oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleMeta {
    pub d: usize,
    pub k: usize,
    pub budget: u64,
}

/// A white-box value that must never feed an attack; only analysis reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticOnly<T>(pub T);

impl<T> DiagnosticOnly<T> {
    pub fn into_inner(self) -> T {
        self.0
    }
}

/// Maps victim logits (`B × K`) to `∂L/∂logits` for a per-example loss.
pub type LogitLossGrad<'a> = dyn FnMut(&Tensor) -> Result<Tensor> + 'a;

pub trait Oracle: Send + Sync {
    fn meta(&self) -> OracleMeta;

    /// Per-class probabilities for each row of `inputs`.
    fn query(&self, inputs: &Tensor, phase: Phase) -> Result<Tensor>;

    /// Current view of the ledger.
    fn ledger(&self) -> QueryLedger;

    fn is_strict(&self) -> bool;

    /// True victim logits, unmetered.
    fn diagnostic_true_logits(&self, _inputs: &Tensor) -> Result<DiagnosticOnly<Tensor>> {
        Err(strict_refusal())
    }

    /// `∇_x` of a loss that depends on the victim's logits, unmetered.
    fn diagnostic_true_input_grad(&self, _inputs: &Tensor, _loss_grad: &mut LogitLossGrad<'_>) -> Result<DiagnosticOnly<Tensor>> {
        Err(strict_refusal())
    }
}

pub(crate) fn strict_refusal() -> Error {
    Error::Policy("white-box diagnostics are disabled in strict mode".into())
}

/// Rejects batches of the wrong width or with coordinates outside `[-1, 1]`.
pub(crate) fn check_query(inputs: &Tensor, d: usize) -> Result<()> {
    if inputs.shape().len() > 2 || inputs.cols() != d {
        return Err(Error::Shape(format!("oracle expects width {d}, got shape {:?}", inputs.shape())));
    }
    if let Some(v) = inputs.data().iter().find(|v| !(v.abs() <= 1.0)) {
        return Err(Error::Domain(format!("coordinate {v}")));
    }
    Ok(())
}

impl<O: Oracle + ?Sized> Oracle for std::sync::Arc<O> {
    fn meta(&self) -> OracleMeta {
        (**self).meta()
    }
    fn query(&self, inputs: &Tensor, phase: Phase) -> Result<Tensor> {
        (**self).query(inputs, phase)
    }
    fn ledger(&self) -> QueryLedger {
        (**self).ledger()
    }
    fn is_strict(&self) -> bool {
        (**self).is_strict()
    }
    fn diagnostic_true_logits(&self, inputs: &Tensor) -> Result<DiagnosticOnly<Tensor>> {
        (**self).diagnostic_true_logits(inputs)
    }
    fn diagnostic_true_input_grad(&self, inputs: &Tensor, loss_grad: &mut LogitLossGrad<'_>) -> Result<DiagnosticOnly<Tensor>> {
        (**self).diagnostic_true_input_grad(inputs, loss_grad)
    }
}
