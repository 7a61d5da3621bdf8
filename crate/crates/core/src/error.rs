use std::io;

use thiserror::Error;

pub type Result<T, E = ClicError> = std::result::Result<T, E>;

/// Errors raised while parsing or entropy-decoding a bitstream.
///
/// Every variant that points into the container carries the byte offset at
/// which the problem was detected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("truncated stream: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("bad magic {found:?} at offset 0")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("architecture hash {found:#018x} does not match loaded weights {expected:#018x}")]
    ConfigMismatch { expected: u64, found: u64 },
    #[error("invalid header field `{field}` at offset {offset}: {reason}")]
    InvalidField {
        field: &'static str,
        offset: usize,
        reason: String,
    },
    #[error("corrupt entropy-coded data in {stream} at byte {offset}")]
    CorruptStream { stream: &'static str, offset: usize },
    #[error("{extra} trailing bytes after {stream}")]
    TrailingData { stream: &'static str, extra: usize },
}

#[derive(Debug, Error)]
pub enum ClicError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tape error: {0}")]
    Tape(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("image error: {0}")]
    Image(String),
    #[error("weights file error: {0}")]
    Weights(String),
    #[error("decode error: {0}")]
    Decode(#[from] DecodeError),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
}

impl ClicError {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        ClicError::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        ClicError::InvalidArgument(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            ClicError::Io(_) | ClicError::Image(_) | ClicError::Weights(_) => 2,
            ClicError::Decode(_) => 3,
            _ => 1,
        }
    }
}
