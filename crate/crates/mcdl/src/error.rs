//! Error type shared by the library and the command-line front end.

use thiserror::Error;

/// Library-wide error. Variants are grouped by how the CLI reports them:
/// parameter problems exit with code 1, unreadable or malformed data with
/// code 2, and numerical failures with code 3.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter violates a documented precondition.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// Matrix or vector shapes do not agree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An input value is NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A label entry is neither 0 nor 1.
    #[error("label entry at row {row}, column {col} is {value}, expected 0 or 1")]
    InvalidLabel { row: usize, col: usize, value: f64 },

    /// A training sample has no positive label.
    #[error("sample {sample} has no positive label")]
    ZeroLabelSample { sample: usize },

    /// A matrix file does not start with the expected magic string.
    #[error("bad magic in {path}: not a matrix file")]
    BadMagic { path: String },

    /// A matrix file ends before the payload its header promises.
    #[error("truncated payload in {path}: header claims {rows}x{cols}")]
    TruncatedPayload { path: String, rows: u64, cols: u64 },

    /// A matrix header's dimensions overflow addressable memory.
    #[error("dimension overflow in {path}: {rows}x{cols}")]
    DimensionOverflow { path: String, rows: u64, cols: u64 },

    /// Synthetic generation could not satisfy its constraints.
    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),

    /// An optimization step failed to produce a usable result.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Process exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParam(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
