use std::path::PathBuf;

use thiserror::Error;

use crate::volume::GridSpec;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {left} vs {right}")]
    GridMismatch { left: GridSpec, right: GridSpec },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("data length {actual} does not match grid voxel count {expected}")]
    DataLength { expected: usize, actual: usize },

    #[error("non-finite value at voxel {index}")]
    NonFinite { index: usize },

    #[error("mask selects no voxels")]
    EmptyMask,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("orientations are not orthogonal: worst pair deviates {worst_deviation_deg:.4} deg from 90 deg (pair {pair:?})")]
    NotOrthogonal { worst_deviation_deg: f64, pair: (usize, usize) },

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("axis inconsistency: {0}")]
    Axis(String),

    #[error("solver diverged after {iterations} iterations (residual {residual:.3e})")]
    Divergence { iterations: usize, residual: f64 },

    #[error("echo times do not match")]
    EchoMismatch,

    #[error(
        "Nyquist violation: echo spacing {spacing_ms:.4} ms exceeds limit {limit_ms:.4} ms for peak |shift| {peak_hz:.2} Hz"
    )]
    Nyquist { spacing_ms: f64, limit_ms: f64, peak_hz: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("payload size mismatch in {path}: expected {expected} bytes, found {actual}")]
    SizeMismatch { path: PathBuf, expected: usize, actual: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}
