use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinate: lat {lat}, lon {lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },

    #[error("invalid tile geometry: {0}")]
    InvalidGeometry(String),

    #[error("area of interest too small: {east_m:.3} m x {north_m:.3} m, tile side is {side_m:.3} m")]
    AoiTooSmall { east_m: f64, north_m: f64, side_m: f64 },

    #[error("query at ({lat}, {lon}) is not covered by any tile")]
    NoCoverage { lat: f64, lon: f64 },

    #[error("query at ({lat}, {lon}) has {count} positive tiles")]
    AmbiguousPositive { lat: f64, lon: f64, count: usize },

    #[error("cannot normalize a zero-norm vector")]
    DegenerateVector,

    #[error("embedding is not unit norm (norm = {0})")]
    NotNormalized(f64),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("duplicate id {0}")]
    DuplicateId(u32),

    #[error("no reference tile within the search scope")]
    EmptyScope,

    #[error("reference database is empty")]
    EmptyDatabase,

    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid embedding file: {0}")]
    BadFormat(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
