use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("decoder column {feature} has norm {norm:e}, below the aligned-mode floor")]
    DegenerateColumn { feature: usize, norm: f64 },

    #[error("non-finite value in {tensor} at step {step}")]
    NonFinite { tensor: String, step: u64 },

    #[error("alignment constraint violated at step {step}: max |a_i - 1| = {deviation:e}")]
    ConstraintViolation { step: u64, deviation: f64 },

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("degenerate denominator: {0}")]
    DegenerateDenominator(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported {format} version {found} (expected {expected})")]
    Version {
        format: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("truncated file while reading {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(op: &'static str, lhs: impl ToString, rhs: impl ToString) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_string(),
            rhs: rhs.to_string(),
        }
    }
}
