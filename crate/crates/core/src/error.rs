use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("unsupported tensor rank {0}")]
    UnsupportedRank(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dimension product overflows")]
    DimOverflow,
    #[error("malformed netpbm header: {0}")]
    MalformedHeader(String),
    #[error("unsupported maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("degenerate partition: {0}")]
    DegeneratePartition(&'static str),
    #[error("empty pasted region")]
    EmptyRegion,
    #[error("donor image {height}x{width} too small for a {min_side}-pixel rectangle")]
    DonorTooSmall {
        height: usize,
        width: usize,
        min_side: usize,
    },
    #[error("metric undefined: {0}")]
    Metric(&'static str),
    #[error("training failed: {aborted} of {total} iterations aborted")]
    TooManyAborts { aborted: usize, total: usize },
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
