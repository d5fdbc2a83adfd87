use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty Voronoi cell on ({lower}, {upper})")]
    EmptyCell { lower: f64, upper: f64 },

    #[error("quantizer of size {level} did not converge: {reason}")]
    Convergence { level: usize, reason: String },

    #[error(
        "covariance matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})"
    )]
    NotPsd { min_eigenvalue: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("curve file: {0}")]
    Csv(#[from] csv::Error),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("transition matrix for step {0} is missing")]
    MissingTransition(usize),

    #[error("correlated 4D transitions need Monte-Carlo settings (mc_samples)")]
    McRequired,
}

impl Error {
    /// True for failures of the numerical machinery itself, as opposed to bad
    /// inputs or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::EmptyCell { .. } | Error::Convergence { .. } | Error::NotPsd { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
