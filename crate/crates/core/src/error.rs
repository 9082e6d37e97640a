use thiserror::Error;

/// Errors raised by the inference engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("parameters outside prior support: {0}")]
    OutOfSupport(String),

    #[error("numerical failure in {what}: {detail}")]
    Numerical { what: String, detail: String },

    #[error("degenerate core {core}: {detail}")]
    DegenerateCore { core: String, detail: String },

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("invalid dataset: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sampler failure at iteration {iteration} in block {block}: {source}")]
    Sampler {
        iteration: usize,
        block: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("semivariogram fit failed: {0}")]
    FitFailure(String),

    #[error("simulation gave up after {attempts} attempts: {detail}")]
    Rejection { attempts: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::OutOfSupport(_) => "out_of_support",
            Error::Numerical { .. } => "numerical",
            Error::DegenerateCore { .. } => "degenerate_core",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Config(_) => "config",
            Error::Sampler { .. } => "sampler",
            Error::FitFailure(_) => "fit_failure",
            Error::Rejection { .. } => "rejection",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn numerical(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            what: what.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
