use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {value} at ({row}, {col}) out of range for {len} rows")]
    Index {
        row: usize,
        col: usize,
        value: usize,
        len: usize,
    },

    #[error("axis {axis} is empty: nothing to aggregate")]
    EmptyAxis { axis: usize },

    #[error("axis {axis} out of range for rank {rank}")]
    BadAxis { axis: usize, rank: usize },

    #[error("graph needs at least 2 points")]
    TooFewPoints,

    #[error("k must be < n (k = {k}, n = {n})")]
    KTooLarge { k: usize, n: usize },

    #[error("k must be at least 1")]
    KTooSmall,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate cloud: all points identical")]
    DegenerateCloud,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("truncated header")]
    TruncatedHeader,

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("monotonic timer unavailable: {0}")]
    Timer(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors that stem from reading or writing files and byte layouts.
    pub fn is_io_or_format(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::TruncatedHeader
                | Error::TruncatedPayload { .. }
                | Error::Format(_)
                | Error::Io(_)
                | Error::Json(_)
        )
    }
}
