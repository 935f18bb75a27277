use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The regularized M-step system could not be factored.
    #[error("singular M-step system")]
    SingularSystem,

    /// No posterior mass landed on any centroid; the object is effectively unobserved.
    #[error("total occlusion: no effective correspondences")]
    TotalOcclusion,

    #[error("infeasible projection: {0}")]
    Infeasible(String),

    #[error("projection did not converge after {iterations} iterations (max violation {max_violation:e})")]
    NoConvergence { iterations: usize, max_violation: f64 },

    #[error("descriptor library: {0}")]
    Library(String),

    #[error("frame {index}: {reason}")]
    MissingFrame { index: usize, reason: String },

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
