//! Weak-label cineloop segmentation lab.
//!
//! A desk-scale pipeline for studying involvement-supervised cancer
//! localization in ultrasound cine sequences: a reverse-mode autodiff
//! engine, a synthetic speckle phantom with pathology-style labels,
//! weak/strong cine augmentation, a small encoder-decoder network with
//! thresholded prediction fusion, and a core-level evaluation harness.

pub mod augment;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod grid;
pub mod model;
pub mod phantom;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use grid::{Grid, Mask};
pub use tensor::Tensor;
