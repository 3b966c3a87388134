use thiserror::Error;

/// Errors raised anywhere in model construction, fitting or I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical error in block `{block}`: {message}")]
    Numerical { block: String, message: String },

    /// Curvature of a coefficient block could not be made negative definite.
    /// The caller may restart the fit from a perturbed state.
    #[error("Hessian of block `{block}` is not negative definite")]
    NonConcaveBlock { block: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Dimension(_) => "dimension",
            Error::Domain(_) => "domain",
            Error::Data(_) => "data",
            Error::Numerical { .. } => "numerical",
            Error::NonConcaveBlock { .. } => "non_concave_block",
            Error::Usage(_) => "usage",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
