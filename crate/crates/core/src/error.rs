// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by every stage of the toolkit.
#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    /// A caller supplied an argument outside the operation's contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A binary file failed validation.
    #[error("format error at byte {offset}: {message}")]
    Format {
        /// Byte offset where validation failed.
        offset: u64,
        /// What was wrong.
        message: String,
    },

    /// A looked-up item (image, feature, record) does not exist.
    #[error("not found: {0}")]
    NotFound(String),

    /// Optimisation produced a non-finite value.
    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    /// The chat / grounding / embedding transport failed after retries.
    #[error("client error: {message}")]
    Client {
        /// Summary of the failure.
        message: String,
        /// Last underlying cause, when one exists.
        #[source]
        source: Option<Box<dyn std::error::Error + Send + Sync>>,
    },

    /// A remote answer could not be interpreted.
    #[error("parse error: {0}")]
    Parse(String),

    /// Label refinement still produced an over-long label after a re-prompt.
    #[error("refinement failed after {attempts} attempts: {last}")]
    RefinementFailed {
        /// Number of requests sent.
        attempts: u32,
        /// Last answer received.
        last: String,
    },

    /// The categoriser never answered with one of the six concepts.
    #[error("categorization failed: {0}")]
    CategorizationFailed(String),

    /// Every consistency verdict was unparseable.
    #[error("judge failed: all {0} verdicts abstained")]
    JudgeFailed(usize),

    /// No image could be scored for a metric.
    #[error("score unavailable: {0}")]
    ScoreUnavailable(String),

    /// Host exchange protocol violation.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Run configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// I/O failure, annotated with the path when known.
    #[error("i/o error on {path:?}: {source}")]
    PathIo {
        /// File involved.
        path: PathBuf,
        /// Underlying error.
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Crate result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn client(msg: impl Into<String>, source: Option<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        Error::Client {
            message: msg.into(),
            source,
        }
    }

    pub(crate) fn at_path(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::PathIo { path, source }
    }

    /// Process exit code used by the command-line front end: 2 for
    /// transport failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Client { .. } | Error::Protocol(_) => 2,
            _ => 1,
        }
    }
}
