use std::path::PathBuf;

use crate::grid::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape((usize, usize, usize)),

    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: Shape, right: Shape },

    #[error("map dimensions {map:?} do not match latent spatial dimensions {latent:?}")]
    MapMismatch {
        map: (usize, usize),
        latent: (usize, usize),
    },

    #[error("data length {got} does not match shape {shape} ({expected} elements)")]
    DataLength {
        shape: Shape,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("{name} = {value} is outside {domain}")]
    OutOfDomain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("reference norm is zero")]
    ZeroReference,

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} is not valid here: {reason}")]
    InvalidTimestep { t: String, reason: &'static str },

    #[error("unknown condition `{0}`")]
    UnknownCondition(String),

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("image {height}x{width} is smaller than the {window}x{window} window")]
    WindowTooLarge {
        height: usize,
        width: usize,
        window: usize,
    },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("config: {0}")]
    Config(String),

    #[error("i/o failure on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Latent file decoding failures. Each variant has a stable numeric code.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:02x?}, expected \"LTED\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing bytes: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: usize, found: usize },
    #[error("zero dimension in header ({0}, {1}, {2})")]
    ZeroDimension(u32, u32, u32),
    #[error("non-finite value at element {0}")]
    NonFinite(usize),
    #[error("bad PGM: {0}")]
    BadPgm(String),
}

impl FormatError {
    pub fn code(&self) -> u8 {
        match self {
            FormatError::BadMagic(_) => 10,
            FormatError::UnsupportedVersion(_) => 11,
            FormatError::UnsupportedDtype(_) => 12,
            FormatError::Truncated { .. } => 13,
            FormatError::TrailingBytes { .. } => 14,
            FormatError::ZeroDimension(..) => 15,
            FormatError::NonFinite(_) => 16,
            FormatError::BadPgm(_) => 17,
        }
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
