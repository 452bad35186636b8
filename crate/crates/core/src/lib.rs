//! Unsupervised discovery of object landmarks with a landmark-conditioned autoencoder.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod nn;
pub mod raster;
pub mod real;
pub mod tps;
pub mod training;

pub use error::{Error, Result};
