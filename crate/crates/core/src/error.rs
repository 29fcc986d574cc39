use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point is behind the camera (z = {z:.3e} m)")]
    BehindCamera { z: f64 },

    #[error("undistortion left the invertible domain after {iterations} iterations")]
    OutOfDomain { iterations: usize },

    #[error("sequencing error: expected sample {expected}, got {got}")]
    Sequencing { expected: u64, got: u64 },

    #[error("teleoperation state error: {0}")]
    State(String),

    #[error("degenerate configuration: {0}")]
    RankDeficient(String),

    #[error("solver did not converge (residual {residual:.3e})")]
    NonConvergence { residual: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unobservable parameter directions: {}", .0.join(", "))]
    Unobservable(Vec<String>),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("png encoding error: {0}")]
    Png(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
