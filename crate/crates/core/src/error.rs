use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive semidefinite (eigenvalue {min_eigenvalue:.3e})")]
    NonPsd { min_eigenvalue: f64 },

    #[error("matrix trace {trace:.3e} is too small to normalize")]
    DegenerateTrace { trace: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("AUC needs at least one positive and one negative label")]
    DegenerateLabels,

    #[error("fold {fold} cannot be stratified: task '{task}' lacks both classes in its {part} part")]
    InfeasibleStratification {
        task: String,
        fold: usize,
        part: &'static str,
    },

    #[error("diagonal entry {index} is not positive ({value:.3e})")]
    DegenerateDiagonal { index: usize, value: f64 },

    #[error("cannot cut {leaves} leaves into {requested} clusters")]
    BadClusterCount { requested: usize, leaves: usize },

    #[error("{}:{line}:{column}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("bad header: {0}")]
    Schema(String),

    #[error("invalid data: {0}")]
    Validation(String),

    #[error("feature '{0}' has no group assignment")]
    MissingFeature(String),

    #[error("feature '{0}' is assigned more than once")]
    DuplicateFeature(String),

    #[error("group map names unknown feature '{0}'")]
    UnknownFeature(String),

    #[error("matrix is not symmetric at ({row}, {col}): difference {difference:.3e}")]
    AsymmetricMatrix {
        row: usize,
        col: usize,
        difference: f64,
    },

    #[error("archive format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            found,
        }
    }

    /// Whether the error comes from the numerics rather than from the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonPsd { .. } | Error::DegenerateTrace { .. } | Error::NumericalFailure(_)
        )
    }
}
