use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the detection stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A spatial-geometry precondition failed (non-integer output extent,
    /// resolution not divisible by the required stride, ...).
    #[error("geometry error in {op}: {detail}")]
    Geometry { op: &'static str, detail: String },

    /// An operation parameter is out of its valid range.
    #[error("invalid parameter for {op}: {detail}")]
    Parameter { op: &'static str, detail: String },

    /// An API contract was violated (e.g. backward from a non-scalar root).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A value is outside the mathematical domain of the operation.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// Geometry degenerated (non-positive decoded depth, zero angle pair,
    /// corner behind the camera).
    #[error("degenerate geometry in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    /// A text input could not be parsed.
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    /// Caller-supplied data violates an input invariant.
    #[error("invalid input: {0}")]
    Input(String),

    /// Synthetic scene generation failed its placement constraints.
    #[error("scene generation failed: {0}")]
    Generation(String),

    /// A dimension template could not be computed.
    #[error("dimension template error: categories without samples: {0:?}")]
    Template(Vec<String>),

    /// Training produced a non-finite loss.
    #[error("training diverged: loss term `{term}` is non-finite")]
    Divergence { term: String },

    /// A checkpoint file or manifest is malformed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn geometry(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Geometry { op, detail: detail.into() }
    }

    pub(crate) fn param(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Parameter { op, detail: detail.into() }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain { op, detail: detail.into() }
    }

    pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Degenerate { op, detail: detail.into() }
    }
}
