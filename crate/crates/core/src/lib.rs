//! Relation-aware point cloud completion at desk scale.
//!
//! * [`geom`]: point clouds, k-NN, farthest point sampling, cropping.
//! * [`autodiff`]: tape-based reverse-mode differentiation and AdamW.
//! * [`relation`]: relation metrics and weighted neighbourhood aggregation.
//! * [`extractor`], [`completion`]: the network.
//! * [`metrics`]: objectives and evaluation metrics.
//! * [`data`], [`config`], [`checkpoint`], [`train`], [`svg`]: the run harness.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod completion;
pub mod config;
pub mod data;
mod error;
pub mod extractor;
pub mod geom;
pub mod io;
pub mod metrics;
pub mod relation;
pub mod selftest;
pub mod svg;
pub mod train;

pub use error::{Error, Result};
