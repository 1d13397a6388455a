//! Skeleton-heatmap action segmentation: pose data handling, heatmap
//! rasterization, a multi-stage temporal convolutional network trained with a
//! small reverse-mode engine, segmentation metrics, and a synthetic dataset
//! generator.

pub mod checkpoint;
pub mod engine;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod pose;
pub mod raster;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
