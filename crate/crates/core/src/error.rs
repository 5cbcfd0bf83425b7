use std::path::PathBuf;

/// Errors raised anywhere in the laboratory.
///
/// Variants are grouped by how a caller is expected to react: bad inputs and
/// configuration are user mistakes, missing artifacts mean an earlier stage
/// has not run, numerical failures abort a run.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("stale artifact {path}: {reason}")]
    StaleArtifact { path: PathBuf, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Training produced a non-finite loss; carries the last finite model.
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        last_good: Box<crate::model::SeqModel>,
    },

    #[error("optimizer did not converge after {iterations} iterations (gradient-mapping norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record in {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
