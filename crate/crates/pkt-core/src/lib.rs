//! Desk-scale library for training persona-specific prefixes on a frozen
//! decoder-only transformer.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`] / [`graph`]: row-major f64 arrays and a recording tape for
//!   reverse-mode gradients, plus a finite-difference checker.
//! - [`optim`]: SGD / AdamW update rules and the linear schedule, behind a
//!   common trait so training loops pick the rule by name.
//! - [`tokenizer`] / [`model`] / [`prefix`] / [`decode`]: word-level
//!   tokenizer, the transformer backbone with prefix-conditioned attention,
//!   per-layer key/value prefix parameters, and beam-search decoding.
//! - [`data`]: persona-grouped corpora, part construction, per-persona
//!   splits, temperature-scaled mixing and the synthetic corpus generator.
//! - [`pipeline`]: the two-stage transfer procedure. Source-prefix
//!   strategies live behind [`pipeline::SourceStrategy`] and are selected
//!   by name at run time.
//! - [`eval`]: n-gram / LCS F1, consistency scoring with pluggable judges,
//!   parameter accounting and report generation.

pub mod data;
pub mod decode;
pub mod eval;
pub mod graph;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod prefix;
pub mod tensor;
pub mod tokenizer;

use std::fmt;

/// Library-wide error type. Variants group into the failure classes the
/// CLI maps to exit codes: configuration, data, numeric.
#[derive(Debug)]
pub enum PktError {
    /// Operand shapes are incompatible for an operation.
    Shape { op: &'static str, detail: String },
    /// Malformed or inconsistent input data (files, corpora, stores).
    Data(String),
    /// Numeric failure: divergence, non-finite values.
    Numeric(String),
    /// Bad configuration or argument values.
    Config(String),
    Io(std::io::Error),
}

impl fmt::Display for PktError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PktError::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            PktError::Data(msg) => write!(f, "data error: {msg}"),
            PktError::Numeric(msg) => write!(f, "numeric failure: {msg}"),
            PktError::Config(msg) => write!(f, "config error: {msg}"),
            PktError::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for PktError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            PktError::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for PktError {
    fn from(err: std::io::Error) -> Self {
        PktError::Io(err)
    }
}

impl From<serde_json::Error> for PktError {
    fn from(err: serde_json::Error) -> Self {
        PktError::Data(format!("json: {err}"))
    }
}

pub type Result<T> = std::result::Result<T, PktError>;
