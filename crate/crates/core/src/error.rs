use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the registration engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown primitive `{0}`")]
    UnknownOp(String),

    #[error("shape mismatch in `{op}`: got {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<(usize, usize)>,
    },

    #[error("backward requires a scalar output, node has shape {0:?}")]
    NotScalar((usize, usize)),

    #[error("non-finite value {value} at voxel ({i}, {j}, {k})")]
    NonFiniteVoxel {
        i: usize,
        j: usize,
        k: usize,
        value: f64,
    },

    #[error("non-finite gradient in parameter array {0}")]
    NonFiniteGradient(usize),

    #[error("numerical abort: {0}")]
    NumericalAbort(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),

    #[error("{path}: bad magic, not a {expected} file")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: unsupported NIfTI datatype code {code}")]
    UnsupportedDatatype { path: PathBuf, code: i16 },

    #[error("{path}: truncated payload, expected {expected} bytes but found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: {dims}-dimensional image; split time points externally and list them in a manifest")]
    NotThreeDimensional { path: PathBuf, dims: i16 },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
