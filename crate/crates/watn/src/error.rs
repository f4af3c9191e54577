use std::path::PathBuf;

use watn_core::data::DataError;

/// Everything that can go wrong while reading or writing the on-disk
/// formats. Corrupted inputs map to distinct variants, never panics.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {found:?}, expected \"WATN\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint format version {found}, expected {expected}")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("truncated file: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("trailing bytes: expected {expected} bytes, got {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("checkpoint text block is not UTF-8")]
    BadTextEncoding,
    #[error("cannot parse line {line:?}: {reason}")]
    Parse { line: String, reason: String },
    #[error("missing key {key:?}")]
    MissingKey { key: String },
    #[error("unknown config key {key:?}")]
    UnknownKey { key: String },
    #[error("bad value {value:?} for key {key:?}")]
    BadValue { key: String, value: String },
    #[error("history field {token:?} must not contain whitespace")]
    InvalidHistoryToken { token: String },
    #[error("non-finite parameter value in checkpoint")]
    NonFiniteParam,
    #[error("missing manifest {path}")]
    MissingManifest { path: PathBuf },
    #[error("manifest parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("video {video}: missing file {path}")]
    MissingFile { video: String, path: PathBuf },
    #[error("video {video}: feature file has {actual} bytes, expected {expected} (T*D*8)")]
    FeatureLength { video: String, expected: usize, actual: usize },
    #[error("video {video}: label file has {actual} bytes, expected {expected} (T*2)")]
    LabelLength { video: String, expected: usize, actual: usize },
    #[error("video {video}: label value {value} out of range (num_actions = {num_actions})")]
    LabelOutOfRange { video: String, value: u16, num_actions: usize },
    #[error("dataset invariant violated: {0}")]
    Data(#[from] DataError),
}
