use std::sync::Mutex;

use super::{check_query, strict_refusal, DiagnosticOnly, LogitLossGrad, Oracle, OracleMeta, Phase, QueryLedger};
use crate::error::{Error, Result};
use crate::nn::{softmax_rows, Network};
use crate::tensor::Tensor;

/// In-process oracle wrapping a victim network.
///
/// The network is private: the only ways to observe it are metered
/// probability queries and, outside strict mode, the diagnostic methods.
#[derive(Debug)]
pub struct LocalOracle {
    victim: Network,
    strict: bool,
    ledger: Mutex<QueryLedger>,
}

impl LocalOracle {
    pub fn new(victim: Network, budget: u64, strict: bool) -> Self {
        Self { victim, strict, ledger: Mutex::new(QueryLedger::new(budget)) }
    }

    fn ledger_lock(&self) -> std::sync::MutexGuard<'_, QueryLedger> {
        self.ledger.lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl Oracle for LocalOracle {
    fn meta(&self) -> OracleMeta {
        OracleMeta { d: self.victim.input_dim(), k: self.victim.output_dim(), budget: self.ledger_lock().budget }
    }

    fn query(&self, inputs: &Tensor, phase: Phase) -> Result<Tensor> {
        check_query(inputs, self.victim.input_dim())?;
        self.ledger_lock().charge(inputs.rows() as u64, phase)?;
        let logits = self.victim.forward(inputs)?;
        Ok(softmax_rows(&logits))
    }

    fn ledger(&self) -> QueryLedger {
        self.ledger_lock().clone()
    }

    fn is_strict(&self) -> bool {
        self.strict
    }

    fn diagnostic_true_logits(&self, inputs: &Tensor) -> Result<DiagnosticOnly<Tensor>> {
        if self.strict {
            return Err(strict_refusal());
        }
        check_query(inputs, self.victim.input_dim())?;
        Ok(DiagnosticOnly(self.victim.forward(inputs)?))
    }

    fn diagnostic_true_input_grad(&self, inputs: &Tensor, loss_grad: &mut LogitLossGrad<'_>) -> Result<DiagnosticOnly<Tensor>> {
        if self.strict {
            return Err(strict_refusal());
        }
        check_query(inputs, self.victim.input_dim())?;
        let (logits, cache) = self.victim.forward_cached(inputs)?;
        let upstream = loss_grad(&logits)?;
        if upstream.shape() != logits.shape() {
            return Err(Error::Shape("loss gradient must match the victim logits".into()));
        }
        let (_, grad) = self.victim.backward(&cache, &upstream)?;
        Ok(DiagnosticOnly(grad))
    }
}
