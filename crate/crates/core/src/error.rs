use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("model fit failed: {0}")]
    Fit(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    /// The error model is already certain at the tested point, so a test
    /// carries no information.
    #[error("degenerate test: predictive sd {sd:e} at the initial design")]
    DegenerateTest { sd: f64 },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("future {seed}: {source}")]
    Future {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Strips any per-future tagging.
    pub fn root(&self) -> &Error {
        match self {
            Error::Future { source, .. } => source.root(),
            other => other,
        }
    }

    /// Configuration and input problems, as opposed to numerical failures.
    pub fn is_config(&self) -> bool {
        matches!(self.root(), Error::Config(_) | Error::InvalidInput(_))
    }
}
