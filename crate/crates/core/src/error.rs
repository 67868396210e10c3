use std::path::PathBuf;

use thiserror::Error;

/// Which structural check a cache file failed on read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheCheck {
    BadMagic,
    UnsupportedVersion,
    UnknownDtype,
    DtypeMismatch,
    Bounds,
    Offsets,
    MaskValue,
}

impl std::fmt::Display for CacheCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CacheCheck::BadMagic => "bad magic",
            CacheCheck::UnsupportedVersion => "unsupported version",
            CacheCheck::UnknownDtype => "unknown dtype",
            CacheCheck::DtypeMismatch => "dtype mismatch",
            CacheCheck::Bounds => "bounds",
            CacheCheck::Offsets => "offsets not increasing",
            CacheCheck::MaskValue => "mask value",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("backward called without a recorded forward pass")]
    BackwardWithoutForward,

    #[error("cache {path}: {check} ({detail})")]
    Cache {
        path: PathBuf,
        check: CacheCheck,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: write failed at byte {position}: {source}")]
    WriteAt {
        path: PathBuf,
        position: u64,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what} in {path}: {detail}")]
    Parse {
        what: &'static str,
        path: PathBuf,
        detail: String,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::Shape {
            op,
            expected: expected.into(),
            found: found.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
