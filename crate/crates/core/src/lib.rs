//! Coarse-to-fine cross-view geo-localization.

pub mod dataset;
pub mod embed;
pub mod eval;
pub mod error;
pub mod geo;
pub mod losses;
pub mod mining;
pub mod model;
pub mod retrieval;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
