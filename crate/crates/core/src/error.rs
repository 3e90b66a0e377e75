use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid network: {0}")]
    Validation(String),

    #[error("branch {branch} ({from} -> {to}) has zero series impedance")]
    ZeroImpedance {
        branch: usize,
        from: usize,
        to: usize,
    },

    #[error("power flow diverged after {iterations} iterations (max mismatch {max_mismatch:.3e} p.u.)")]
    Diverged { iterations: usize, max_mismatch: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the numerics (divergence, singularity)
    /// rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. } | Error::Singular(_) | Error::Numerical(_)
        )
    }
}
