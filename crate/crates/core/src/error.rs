use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("depth {depth} m is outside the unambiguous range (0, {max} m)")]
    DepthOutOfRange { depth: f64, max: f64 },

    #[error("scene has no pixel with positive reflectivity")]
    ZeroReflectivity,

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated or oversized payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("dimensions {0} overflow the addressable size")]
    DimOverflow(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn shape_mismatch(
    expected: impl std::fmt::Debug,
    actual: impl std::fmt::Debug,
) -> Error {
    Error::ShapeMismatch {
        expected: format!("{expected:?}"),
        actual: format!("{actual:?}"),
    }
}
