use thiserror::Error;

/// Errors produced by the simulation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid transition kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid reward table: {0}")]
    InvalidReward(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("model generation failed after {attempts} candidates: {reason}")]
    GenerationFailure { attempts: usize, reason: String },

    #[error("infeasible linear profile: {0}")]
    InfeasibleProfile(String),

    #[error("test statistic needs at least one completed episode")]
    EmptyData,

    #[error("search exceeds size limit: {0}")]
    SizeLimit(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("seed sets do not match: {0}")]
    MismatchedSeeds(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
