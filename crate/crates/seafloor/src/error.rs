//! Crate-wide error type.

use std::path::PathBuf;

/// Errors raised by any public operation in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("failed to decode image: {0}")]
    Decode(String),

    #[error("bad magic: expected \"HCUB\"")]
    BadMagic,

    #[error("unsupported cube container version {0}")]
    VersionUnsupported(u32),

    #[error("truncated cube file: {0}")]
    TruncatedFile(String),

    #[error("wavelengths must be strictly increasing")]
    WavelengthOrder,

    #[error("band {band} out of range (cube has {bands} bands)")]
    BandOutOfRange { band: usize, bands: usize },

    #[error("no cube files found under {0}")]
    NoCubesFound(PathBuf),

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("illuminant is zero (below {eps}) in every band")]
    ZeroIlluminantBand { eps: f64 },

    #[error("range map contains negative values")]
    NegativeRange,

    #[error("attenuation coefficient must be positive, got {0}")]
    NonPositiveAlpha(f64),

    #[error("image too small: need at least {min}x{min}, got {height}x{width}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("tensor shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
