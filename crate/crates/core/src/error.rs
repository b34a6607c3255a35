//! One error type shared by the whole workspace.
//!
//! The variants are coarse on purpose: callers almost always either bubble the
//! error up to the CLI (which prints it and exits) or assert on the variant in
//! tests. The message carries the specifics.

use std::fmt;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes of the core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Mixed dtypes where a single dtype is required.
    #[error("dtype mismatch: {0}")]
    Dtype(String),

    /// Invalid configuration value (hyperparameter, geometry, file syntax...).
    #[error("invalid config: {0}")]
    Config(String),

    /// An API contract was violated (stale tape, mismatched saved state,
    /// out-of-range argument).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input is structurally valid but the operation is undefined on it
    /// (e.g. CNR with equal region standard deviations).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Requested something the implementation intentionally does not support
    /// (e.g. FFT on a non-power-of-two grid).
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Numerical failure at run time (divergence, non-finite values).
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// Malformed file contents (bad magic, truncated payload, unknown field).
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    /// Underlying I/O failure, annotated with the path being touched.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Malformed contents of the file at `path`.
    pub fn format(path: impl AsRef<std::path::Path>, msg: impl fmt::Display) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            msg: msg.to_string(),
        }
    }
}
