use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Who a query batch is for. Evaluation queries are out-of-band and unmetered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Generator,
    Student,
    Evaluation,
}

impl Phase {
    pub fn is_metered(self) -> bool {
        !matches!(self, Phase::Evaluation)
    }
}

/// Exact accounting of metered queries against a budget.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryLedger {
    pub budget: u64,
    pub used_generator_phase: u64,
    pub used_student_phase: u64,
    /// Informational only; never counted against the budget.
    pub evaluation_queries: u64,
    pub exhausted: bool,
}

impl QueryLedger {
    pub fn new(budget: u64) -> Self {
        Self { budget, ..Self::default() }
    }

    pub fn used_total(&self) -> u64 {
        self.used_generator_phase + self.used_student_phase
    }

    pub fn remaining(&self) -> u64 {
        self.budget - self.used_total()
    }

    pub fn can_afford(&self, n: u64) -> bool {
        n <= self.remaining()
    }

    /// Charges `n` queries to `phase`, all or nothing.
    pub fn charge(&mut self, n: u64, phase: Phase) -> Result<()> {
        if !phase.is_metered() {
            self.evaluation_queries += n;
            return Ok(());
        }
        if !self.can_afford(n) {
            if self.remaining() == 0 {
                self.exhausted = true;
            }
            return Err(Error::BudgetExhausted { requested: n, remaining: self.remaining() });
        }
        match phase {
            Phase::Generator => self.used_generator_phase += n,
            Phase::Student => self.used_student_phase += n,
            Phase::Evaluation => unreachable!(),
        }
        Ok(())
    }
}
