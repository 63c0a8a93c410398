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
    #[error("bad magic bytes {0:02x?}, expected \"CPCL\"")]
    BadMagic([u8; 4]),
    #[error("unsupported feature-file version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown modality code {0}")]
    UnknownModality(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("duplicate frame index {0}")]
    DuplicateFrame(usize),
    #[error("frame index {index} out of range for {frames} frames")]
    FrameOutOfRange { index: usize, frames: usize },
    #[error("{path}:{line}: malformed line: {msg}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("signal too short: {len} samples, frame length {frame_len}")]
    SignalTooShort { len: usize, frame_len: usize },
    #[error("NaN in input signal at sample {0}")]
    NanInput(usize),
    #[error("invalid wav: {0}")]
    Wav(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite intermediate in {stage} at token {token}")]
    NonFiniteIntermediate { stage: &'static str, token: usize },
    #[error("index {index} out of range for vocabulary of size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("unknown polarity {0:?}")]
    UnknownPolarity(String),
    #[error("invalid label {0}")]
    InvalidLabel(u8),
    #[error("NaN gradient for parameter {0}")]
    NanGradient(String),
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("degenerate test: all paired differences are identical")]
    DegenerateTest,
    #[error("unregistered differentiable op {0:?}")]
    UnregisteredOp(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteIntermediate { .. } | Error::NanGradient(_) | Error::Diverged { .. }
        )
    }
}
