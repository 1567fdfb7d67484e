use thiserror::Error;

/// Errors raised by the simulator core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("singular matrix: pivot {index} has magnitude {magnitude:e}")]
    Singular { index: usize, magnitude: f64 },

    #[error("zero pivot at row {index} in tridiagonal elimination")]
    ZeroPivot { index: usize },

    #[error("matrix is not positive definite (failed at column {index})")]
    NotPositiveDefinite { index: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("value {value} out of range for {what} (allowed {min}..={max})")]
    OutOfRange {
        what: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("integer {value} not representable in {bits}-bit two's complement")]
    Overflow { value: i64, bits: u32 },

    #[error("invalid slice scheme `{0}`")]
    Scheme(String),

    #[error("scheme incompatible with hardware: {0}")]
    Incompatible(String),

    #[error("degenerate circuit: {0}")]
    Degenerate(String),

    #[error("missing slice-pair result ({input}, {weight})")]
    MissingPair { input: usize, weight: usize },

    #[error("layer `{0}` has no programmed weights; call update_weight first")]
    NotProgrammed(String),

    #[error("layer `{0}` master weights changed since the last update_weight")]
    StaleCache(String),

    #[error("no saved activations for backward pass of `{0}`")]
    MissingActivations(String),

    #[error("training diverged at epoch {epoch}, step {step} (loss = {loss})")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dims(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
