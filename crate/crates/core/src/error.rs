use thiserror::Error;

/// Errors surfaced by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("duplicate key: {0}")]
    DuplicateKey(String),

    #[error("degenerate cell {cell}: {message}")]
    DegenerateCell { cell: String, message: String },

    #[error("missing enrollment history for student {0}")]
    MissingHistory(String),

    #[error("collinear columns: {}", .0.join(", "))]
    Collinear(Vec<String>),

    #[error("degenerate regressor {0}")]
    DegenerateRegressor(String),

    #[error("fixed-effect demeaning did not converge: residual within-group mean {residual:e} after {sweeps} sweeps")]
    DemeaningDiverged { residual: f64, sweeps: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("deconvolution grid too narrow: {0}")]
    GridTooNarrow(String),

    #[error("penalty calibration failed: {0}")]
    CalibrationFailed(String),

    #[error("unscorable respondent {respondent}: {reason}")]
    Unscorable { respondent: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
