//! Desk-scale laboratory for data-free model extraction.
//!
//! A victim classifier is trained on a procedurally generated task and hidden
//! behind a query-metered probability oracle. The attack trains a student to
//! imitate it using only synthetic queries from a generator, which is itself
//! trained with zeroth-order gradient estimates obtained through the oracle.

pub mod analysis;
pub mod attack;
pub mod data;
pub mod disagreement;
pub mod error;
pub mod nn;
pub mod oracle;
pub mod report;
pub mod rng;
pub mod surrogate;
pub mod tensor;
pub mod zo;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
