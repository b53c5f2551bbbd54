//! Multi-task head pose estimation at desk scale.
//!
//! The crate trains a single encoder-decoder network that predicts three
//! related things about a face crop: the rigid head pose (two 6-parameter
//! heads at the 1x1 bottleneck), per-landmark probability heatmaps and
//! per-landmark visibility (both at the decoder end). A second stage, an
//! occlusion-aware cascade of gradient-boosted regression trees, refines the
//! rigid landmark initialization using features read from the heatmaps while
//! discarding updates anchored at occluded landmarks.
//!
//! Everything runs on the CPU in f64 and is deterministic for a fixed seed.
//! The [`data`] module ships a synthetic face renderer so the whole pipeline
//! (including its trend experiments) is testable without external datasets.
//!
//! Start with [`tensor`] for the autodiff engine, [`model`] for the network,
//! [`geometry`] for pose math and the iterative pose solver, [`regressor`]
//! for the cascade, and [`train`] for the training loop and experiments. The
//! `book/` directory of the repository walks through the concepts; its code
//! samples compile as doc-tests of this crate.

pub mod data;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod regressor;
pub mod tensor;
pub mod train;

#[cfg(doctest)]
mod guide;

pub use error::{Error, Result};
