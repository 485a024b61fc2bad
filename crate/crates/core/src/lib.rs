//! Cascaded lane-boundary detection and classification.
//!
//! A segmentation network assigns each pixel to background or one of up to
//! [`geometry::K_MAX`] boundary instances. Each decoded boundary is turned into
//! a square descriptor of its pixels and classified by a small second network.

pub mod classifier;
pub mod datasets;
pub mod descriptor;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod segmentation;

pub use error::{Error, Result};
