use thiserror::Error;

/// Errors produced by the library. Variants are grouped so the CLI can map
/// them onto validation (exit 3) versus numerical-failure (exit 4) codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimension(String),

    #[error("invalid k = {k} for n = {n} points (require k < n)")]
    InvalidK { k: usize, n: usize },

    #[error("unit {unit} is isolated (degree 0); row-standardization is undefined")]
    IsolatedUnit { unit: usize },

    #[error("design matrix is rank deficient (rank {rank} < p = {p})")]
    RankDeficient { rank: usize, p: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad inputs rather than numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidDimension(_)
                | Error::InvalidK { .. }
                | Error::IsolatedUnit { .. }
                | Error::RankDeficient { .. }
                | Error::LengthMismatch { .. }
                | Error::Data(_)
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
