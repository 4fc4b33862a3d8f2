//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown label {label:?} at {path}:{line} (label space is fixed)")]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        label: String,
    },

    #[error("empty corpus: {path}")]
    EmptyCorpus { path: PathBuf },

    #[error("label space mismatch: checkpoint has {checkpoint_n} labels, data has {data_n} (first unknown: {example:?})")]
    LabelSpaceMismatch {
        checkpoint_n: usize,
        data_n: usize,
        example: String,
    },

    #[error("non-finite loss at step {step} (classification {classification}, contrastive {contrastive:?})")]
    NonFiniteLoss {
        step: usize,
        classification: f64,
        contrastive: Option<f64>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("bad matrix file: {0}")]
    MatrixFile(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error: 2 for usage/config problems,
    /// 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Io { .. }
            | Error::Parse { .. }
            | Error::UnknownLabel { .. }
            | Error::EmptyCorpus { .. }
            | Error::Checkpoint(_)
            | Error::MatrixFile(_) => 2,
            Error::LabelSpaceMismatch { .. } | Error::NonFiniteLoss { .. } | Error::Contract(_) => {
                1
            }
        }
    }
}
