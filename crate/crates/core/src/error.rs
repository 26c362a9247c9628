use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the clustering engine.
#[derive(Debug, Error)]
pub enum FmtcError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("isolated vertex at row {row}: affinity row sums to zero")]
    IsolatedVertex { row: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("degenerate projection: smallest singular value {sigma_min:e} below 1e-12")]
    DegenerateProjection { sigma_min: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("internal consistency: {0}")]
    Internal(String),

    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: Box<FmtcError>,
    },

    #[error("round {round}, server: {source}")]
    Server {
        round: usize,
        #[source]
        source: Box<FmtcError>,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, FmtcError>;

impl FmtcError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FmtcError::Io {
            path: path.into(),
            source,
        }
    }
}
