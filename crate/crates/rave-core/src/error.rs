//! Error types shared across the crate.

use thiserror::Error;

/// Errors from the bitstream container and quantization layer.
#[derive(Debug, Error)]
pub enum CodecError {
    #[error("bad magic bytes (expected \"RAVS\")")]
    BadMagic,
    #[error("unsupported bitstream version {0}")]
    UnsupportedVersion(u16),
    #[error("header CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("truncated bitstream: needed {needed} bytes, had {available}")]
    Truncated { needed: usize, available: usize },
    #[error("corrupt payload: {0}")]
    Corrupt(String),
    #[error("empty index set: nothing to encode")]
    EmptySubset,
    #[error("code {code} out of range for {bits}-bit plane")]
    CodeOutOfRange { code: u32, bits: u8 },
    #[error("invalid quantization spec: {0}")]
    InvalidSpec(String),
}

/// Errors from rate lookup and interpolation.
#[derive(Debug, Error)]
pub enum RateError {
    #[error("target rate {target} B is below the lowest anchor rate {min} B")]
    BelowMinimum { target: u64, min: u64 },
    #[error("degenerate rate table: R(G_{level}) == R(G_{next}) == {rate} B")]
    DegenerateTable { level: usize, next: usize, rate: u64 },
    #[error("selection budget {budget} exceeds context size {available}")]
    BudgetExceedsContext { budget: usize, available: usize },
    #[error("rate table is empty")]
    EmptyTable,
}

/// Top-level error type for library operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("training diverged (non-finite loss) at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Shorthand for `Error::Invalid` with formatted message.
macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::Invalid(format!($($arg)*))
    };
}
pub(crate) use invalid;
