//! Jump air-time detection from 2D skeleton sequences.

pub mod dataset;
pub mod embedding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
