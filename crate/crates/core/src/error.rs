use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// A caller broke an API contract (missing input, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or infinity observed.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A gradient or reference oracle disagreed beyond tolerance.
    #[error("oracle failure: {0}")]
    Oracle(String),

    /// Malformed dataset, checkpoint or manifest.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Toml(_) => 2,
            Error::NonFinite(_) => 3,
            Error::Oracle(_) => 4,
            _ => 1,
        }
    }
}
