//! Pixel-wise anomaly segmentation combining uncertainty dispersion maps with
//! re-synthesis comparison.

pub mod backbones;
pub mod data;
pub mod datagen;
pub mod dissimilarity;
pub mod ensemble;
pub mod error;
pub mod framework;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod uncertainty;

pub use error::{Error, Result};
