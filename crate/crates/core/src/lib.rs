//! Relation-aware single-object tracking on LiDAR point clouds.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`] - points, oriented boxes, cropping, IoU and ball queries.
//! * [`numeric`] - a small dense-matrix neural substrate with hand-written
//!   backward passes, Adam, gradient checking and the checkpoint format.
//! * [`sampling`] - random, distance/feature farthest-point and
//!   relation-aware subsampling.
//! * [`backbone`] - the shared two-branch set-abstraction feature extractor.
//! * [`attention`] - relation attention blocks and the point relation
//!   transformer.
//! * [`heads`] - coarse head, refinement module and box decoding.
//! * [`pipeline`] - targets, losses, the full network, training and tracking.
//! * [`evaldata`] - metrics, tracklet datasets, synthetic scenes, evaluation.
//! * [`checks`] - the gradient and oracle verification suites.

pub mod attention;
pub mod backbone;
pub mod checks;
pub mod config;
pub mod error;
pub mod evaldata;
pub mod geometry;
pub mod heads;
pub mod numeric;
pub mod pipeline;
pub mod sampling;

pub use error::{Error, Result};
