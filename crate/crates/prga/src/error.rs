//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by any operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic at byte offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: u64,
        expected: String,
        found: String,
    },
    #[error("truncated file at byte offset {offset}: needed {needed} more bytes")]
    TruncatedFile { offset: u64, needed: usize },
    #[error("label {label} out of range (classes: {classes}) at byte offset {offset}")]
    LabelOutOfRange {
        offset: u64,
        label: u32,
        classes: u32,
    },
    #[error("non-finite value at byte offset {offset} ({context})")]
    NonFiniteValue { offset: u64, context: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot normalize vector with norm {norm:.3e} (<= {eps:.0e})")]
    ZeroVector { norm: f64, eps: f64 },
    #[error("grid {rows}x{cols} too fine for {width}x{height} image")]
    GridTooFine {
        rows: u32,
        cols: u32,
        width: u32,
        height: u32,
    },
    #[error("dimension mismatch in {op}: {detail}")]
    DimMismatch { op: String, detail: String },
    #[error("attention row {row} is entirely masked")]
    AllMasked { row: usize },
    #[error("empty input to {op}")]
    EmptyInput { op: String },
    #[error("class {class} has {found} support items, expected {expected}")]
    ClassCoverage {
        class: usize,
        found: usize,
        expected: usize,
    },
    #[error("query vector is not L2-normalized (norm {norm})")]
    NotNormalized { norm: f64 },
    #[error("class {class} has only {available} items, need more than {requested}")]
    InsufficientItems {
        class: usize,
        available: usize,
        requested: usize,
    },
    #[error("no forward graph recorded before backward")]
    GraphNotRecorded,
    #[error("non-finite loss {loss} at epoch {epoch}, item {item}")]
    NonFiniteLoss { loss: f64, epoch: usize, item: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dim(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::DimMismatch {
            op: op.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
