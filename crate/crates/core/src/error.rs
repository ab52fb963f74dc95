use thiserror::Error;

/// Errors produced by the detection library.
#[derive(Debug, Error)]
pub enum MudError {
    #[error("invalid dimensions: {0}")]
    Dimension(String),

    #[error("invalid parameter `{field}`: {reason}")]
    Parameter { field: &'static str, reason: String },

    #[error("parse error at row {row}, column {col}: {reason}")]
    Parse { row: usize, col: usize, reason: String },

    #[error("ragged matrix file: row {row} has {found} entries, expected {expected}")]
    Ragged { row: usize, found: usize, expected: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),

    /// The dual iterate left the region where `P_p` is positive definite.
    #[error("dual iterate outside the positive-definite domain; backtrack the step size")]
    IndefiniteDual,

    #[error("solver did not converge after {iterations} iterations (objective {objective:.6e}, equality residual {residual:.3e})")]
    NotConverged {
        iterations: usize,
        objective: f64,
        residual: f64,
        last_iterate: Box<nalgebra::DMatrix<f64>>,
    },

    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MudError>;

/// Reads a whole file, naming it in the error.
pub(crate) fn read_file(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| MudError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn param_err(field: &'static str, reason: impl Into<String>) -> MudError {
    MudError::Parameter {
        field,
        reason: reason.into(),
    }
}
