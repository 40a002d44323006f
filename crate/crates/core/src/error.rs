//! Error taxonomy for the whole crate.
//!
//! Variants map onto process exit codes (see `cli`): usage problems exit 2,
//! bad configuration 3, bad data 4, everything else 5.

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes or sizes fed to an operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Values outside an operation's numeric domain (non-positive step sizes,
    /// NaN inputs, labels out of range, ...).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// Malformed or inconsistent run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed dataset contents (undecodable rasters, size mismatches,
    /// label values out of range).
    #[error("data error: {0}")]
    Data(String),

    /// Filesystem problem, tagged with the offending path.
    #[error("{}: {detail}", path.display())]
    Io { path: PathBuf, detail: String },

    /// Checkpoint bytes fail the magic or CRC check, or are truncated.
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    /// Checkpoint format version this build does not understand.
    #[error("unsupported checkpoint version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },

    /// Metric request that has no defined value (e.g. every pixel ignored).
    #[error("metrics undefined: {0}")]
    Metrics(String),

    /// Command-line misuse detected after argument parsing.
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain { op, detail: detail.into() }
    }

    pub fn io(path: impl AsRef<Path>, err: impl std::fmt::Display) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), detail: err.to_string() }
    }

    /// Process exit code for the CLI. 0 and 2 are produced elsewhere
    /// (success, and argument-parse failures respectively).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Config(_) => 3,
            Error::Data(_) => 4,
            _ => 5,
        }
    }
}
