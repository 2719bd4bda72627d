use thiserror::Error;

use crate::metrics::ClusterAssignment;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },

    #[error("calibration set too small: need the {index}-th score but only {n} are available")]
    CalibrationSetTooSmall { index: usize, n: usize },

    #[error("degenerate region: {size} point(s), need at least 2")]
    DegenerateRegion { size: usize },

    #[error("degenerate complement: no carrier points lie outside the base region")]
    DegenerateComplement,

    #[error("empty carrier: distance to an empty point set is undefined")]
    EmptyCarrier,

    #[error("unsupported dimension {0}: grids are defined for 1..=4")]
    UnsupportedDimension(usize),

    #[error("column {column} has zero variance on the fitting rows")]
    ZeroVariance { column: String },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("k-means could not satisfy the minimum cluster size after {restarts} restarts")]
    ConstraintUnsatisfied {
        restarts: usize,
        best: Box<ClusterAssignment>,
    },

    #[error("cluster {0} is empty")]
    EmptyCluster(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
