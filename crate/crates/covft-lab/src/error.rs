use std::path::{Path, PathBuf};

/// Crate-wide error type. Variants are grouped by how the CLI maps them to
/// exit codes: configuration problems are user errors, the rest are runtime
/// failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad configuration value or flag combination.
    #[error("config: {0}")]
    Config(String),

    /// Structurally invalid input (token ids out of range, empty dataset, ...).
    #[error("input: {0}")]
    Input(String),

    /// Tensor shape disagreement inside an op.
    #[error("shape in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Non-finite value where a finite one is required.
    #[error("numeric: {0}")]
    Numeric(String),

    /// An internal invariant was violated; indicates a bug, not bad input.
    #[error("contract: {0}")]
    Contract(String),

    /// Data too degenerate to analyze (e.g. all-identical vectors).
    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn parse(path: impl AsRef<Path>, detail: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().to_path_buf(),
            detail: detail.into(),
        }
    }

    /// True for errors that mean the caller passed a bad config/flag, as
    /// opposed to something going wrong mid-run.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Input(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
