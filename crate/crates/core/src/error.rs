//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, estimation, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix that must be symmetric positive (semi-)definite is not.
    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    /// Dimension mismatch between related inputs.
    #[error("shape error: {0}")]
    ShapeError(String),

    /// A model specification violates its own consistency rules.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// A scalar argument is outside its admissible range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A linear constraint cannot be applied (rank-deficient or inconsistent).
    #[error("degenerate constraint: {0}")]
    DegenerateConstraint(String),

    /// Simulated forecast moments are unusable (non-finite or singular).
    #[error("degenerate forecast: {0}")]
    DegenerateForecast(String),

    /// Not enough observations for the requested fit.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Mode search was started where the target density is identically zero.
    #[error("flat region: {0}")]
    FlatRegion(String),

    /// A price table entry is unusable.
    #[error("invalid price at row {row}: {message}")]
    InvalidPrice { row: usize, message: String },

    /// Malformed input file.
    #[error("parse error: {0}")]
    Parse(String),

    /// A configuration key is missing, unknown, or out of range.
    #[error("config error: {0}")]
    Config(String),

    /// The run completed and its outputs were written, but some per-day
    /// solves failed and their records carry the failure flag.
    #[error("flagged failures: {0}")]
    Flagged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::Io(io),
                other => Error::Parse(format!("{other:?}")),
            }
        } else {
            Error::Parse(e.to_string())
        }
    }
}

impl Error {
    /// Short machine-readable tag used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidCovariance(_) => "invalid_covariance",
            Error::ShapeError(_) => "shape_error",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::DegenerateConstraint(_) => "degenerate_constraint",
            Error::DegenerateForecast(_) => "degenerate_forecast",
            Error::InsufficientData(_) => "insufficient_data",
            Error::FlatRegion(_) => "flat_region",
            Error::InvalidPrice { .. } => "invalid_price",
            Error::Parse(_) => "parse_error",
            Error::Config(_) => "config_error",
            Error::Flagged(_) => "flagged_failures",
            Error::Io(_) => "io_error",
        }
    }
}
