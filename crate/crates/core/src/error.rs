use std::path::PathBuf;

/// Errors raised anywhere in the model stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("matrix is not positive definite (leading minor {minor} failed after jitter {jitter:e})")]
    NotPositiveDefinite { minor: usize, jitter: f64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("backward requires a 1x1 output, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("node {0} does not belong to this tape")]
    UnknownNode(usize),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("missing cells in panel: {}", .0.join(", "))]
    MissingCells(Vec<String>),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("refusing to overwrite {0} (pass --force)")]
    OutputExists(PathBuf),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    /// Short machine-readable tag used by the CLI error envelope.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::NonFinite { .. } => "non_finite",
            Error::NotScalar { .. } => "not_scalar",
            Error::UnknownNode(_) => "unknown_node",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::DegenerateData(_) => "degenerate_data",
            Error::MissingCells(_) => "missing_cells",
            Error::Parse { .. } => "parse",
            Error::Config { .. } => "config",
            Error::Divergence { .. } => "divergence",
            Error::Checkpoint(_) => "checkpoint",
            Error::OutputExists(_) => "output_exists",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
