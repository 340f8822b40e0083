use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed csv in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("schema error in {path}: missing required column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("covariate `{covariate}`: {reason}")]
    Covariate { covariate: String, reason: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite log density in parameter block `{block}`")]
    NonFinite { block: &'static str },

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv { path: path.into(), source }
    }
}
