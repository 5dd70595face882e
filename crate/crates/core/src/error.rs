use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("non-finite value in {0}")]
    Numeric(&'static str),

    #[error("patient {0} has no visible history")]
    EmptyHistory(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("degenerate training data: {0}")]
    DegenerateData(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("AUROC undefined: {0}")]
    UndefinedMetric(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("training diverged at step {step}: loss is {loss}")]
    Training { step: usize, loss: f64 },

    #[error("gradient check failed at {param}[{index}]: analytic {analytic}, numeric {numeric}")]
    GradCheck {
        param: String,
        index: usize,
        analytic: f64,
        numeric: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("malformed {what} at line {line}: {message}")]
    Format {
        what: &'static str,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
