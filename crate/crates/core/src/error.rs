use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: axis {axis}: {detail}")]
    Dimension {
        op: &'static str,
        axis: String,
        detail: String,
    },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("dataset contract violated: {0}")]
    DatasetContract(String),

    #[error("scene spec error: {0}")]
    Spec(String),

    #[error("parse error in {path} at byte {offset}: {detail}")]
    Parse {
        path: PathBuf,
        offset: usize,
        detail: String,
    },

    #[error("config error at `{path}`: {detail}")]
    Config { path: String, detail: String },

    #[error("pipeline order error: missing or stale artifact {artifact} (run `{needs}` first)")]
    PipelineOrder { artifact: PathBuf, needs: String },

    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: impl ToString, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axis: axis.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
