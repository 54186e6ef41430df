use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("integrator failed at t = {t:e} s: {reason}")]
    Solver { t: f64, reason: String },

    #[error("training diverged in stage {stage}, iteration {iteration}: {reason}")]
    Divergence {
        stage: usize,
        iteration: usize,
        reason: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("malformed artifact {path}: {message}")]
    Artifact { path: String, message: String },

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

    pub fn artifact(path: impl AsRef<std::path::Path>, message: impl Into<String>) -> Self {
        Error::Artifact {
            path: path.as_ref().display().to_string(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Solver { .. } | Error::Divergence { .. } | Error::Numerical(_) => 3,
            Error::MissingArtifact(_) | Error::Artifact { .. } => 4,
            _ => 1,
        }
    }
}
