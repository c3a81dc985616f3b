use std::path::PathBuf;

/// Errors raised by the debiasing pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("dimension {dim} exceeds the dense oracle limit {max}")]
    SizeGuard { dim: usize, max: usize },
    #[error("solver failed at iteration {iteration}: {reason}")]
    SolverFailure { iteration: usize, reason: String },
    #[error("group {0} has no samples")]
    GroupEmpty(String),
    #[error("cache misaligned with mask: {0}")]
    Alignment(String),
    #[error("unlearning the entire training set leaves nothing to remain")]
    DegenerateRemain,
    #[error("malformed {what}: {msg}")]
    Format { what: String, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &str, msg: impl Into<String>) -> Self {
        Error::Format {
            what: what.to_string(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
