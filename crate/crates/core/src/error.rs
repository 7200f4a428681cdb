use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the calibration pipeline.
#[derive(Debug, Error)]
pub enum CalibError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("time {t} s outside trajectory span [{start}, {end}] s")]
    OutOfRange { t: f64, start: f64, end: f64 },

    #[error("degenerate plane fit: {0}")]
    DegenerateFit(String),

    #[error("no voxel reached the minimum support of {min_support} points")]
    EmptyResult { min_support: usize },

    #[error("insufficient overlap: no cross-angle correspondences could be formed")]
    InsufficientOverlap,

    #[error("degenerate geometry: J^T W J has rank < {dof}, null direction {null_direction:?}")]
    DegenerateGeometry {
        dof: usize,
        /// Unit direction in (roll, pitch, tx, ty[, tau]) parameter space.
        null_direction: Vec<f64>,
    },
}

/// Coarse error classes, used for CLI exit codes and machine-readable error lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    DegenerateGeometry,
}

impl CalibError {
    pub fn class(&self) -> ErrorClass {
        match self {
            CalibError::Io { .. }
            | CalibError::Parse { .. }
            | CalibError::Validation(_)
            | CalibError::EmptyInput(_)
            | CalibError::OutOfRange { .. } => ErrorClass::Input,
            CalibError::DegenerateFit(_)
            | CalibError::EmptyResult { .. }
            | CalibError::InsufficientOverlap
            | CalibError::DegenerateGeometry { .. } => ErrorClass::DegenerateGeometry,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CalibError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CalibError>;
