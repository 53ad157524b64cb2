//! Newline-delimited JSON wire format between oracle clients and the server.
//!
//! ```text
//! client -> server   {"op":"meta"}
//!                    {"op":"query","phase":"student","inputs":[[...],...]}
//! server -> client   {"d":..,"k":..,"budget":..,"used":..,"remaining":..}
//!                    {"probs":[[...],...],"used":n,"remaining":n}
//!                    {"error":"budget_exhausted"}
//!                    {"error":"bad_input","detail":"..."}
//! ```
//!
//! Floats are written in the shortest form that parses back to the same
//! `f64`, so values cross the wire bit-exactly.

use serde::{Deserialize, Serialize};

use super::Phase;

pub const BUDGET_EXHAUSTED: &str = "budget_exhausted";
pub const BAD_INPUT: &str = "bad_input";
pub const BAD_REQUEST: &str = "bad_request";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Meta,
    Query { phase: Phase, inputs: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Error {
        error: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        detail: Option<String>,
    },
    Probs {
        probs: Vec<Vec<f64>>,
        used: u64,
        remaining: u64,
    },
    Meta {
        d: usize,
        k: usize,
        budget: u64,
        used: u64,
        remaining: u64,
    },
}

impl Response {
    pub fn error(kind: &str, detail: Option<String>) -> Self {
        Response::Error { error: kind.to_string(), detail }
    }
}
