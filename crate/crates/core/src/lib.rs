//! rlab: an interpretable text-classification toolkit.
//!
//! The crate trains a selector/predictor/discriminator rationale model and a
//! small transformer classifier on readmission-style corpora, explains their
//! predictions (extractive rationales, self-attention importance, layer-wise
//! relevance propagation), and evaluates everything with ranking metrics and
//! rationale statistics. All model math runs on a dense float64 reverse-mode
//! autodiff tape so the whole pipeline is dependency-light and deterministic.

pub mod checkpoint;
pub mod cohort;
pub mod forest;
pub mod gradcheck;
pub mod graph;
pub mod gru;
pub mod infocal;
pub mod lm;
pub mod logreg;
pub mod lrp;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod runconfig;
pub mod skipgram;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod transformer;

use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// everything except `Io` and `Numeric` is a validation failure.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes for an operation; names the op.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A forward value or loss became NaN/Inf.
    #[error("numeric error in {0}: non-finite value")]
    Numeric(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed input data, with a 1-based line number where known.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A metric that is undefined for the given inputs (e.g. single-class AUC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for errors caused by bad inputs or configuration rather than by
    /// failures at run time (I/O, numerical divergence).
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Numeric(_))
    }
}
