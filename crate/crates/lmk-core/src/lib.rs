//! Semi-supervised landmark localization on synthetic shape data.
//!
//! The crate bundles a reverse-mode autodiff engine sized for small
//! convolutional landmark networks, affine geometry for equivariance
//! training, procedural Shapes/Blocks dataset generation with a bit-exact
//! container format, the three compared network architectures, the
//! composite training objective, a training/evaluation harness, and an
//! adjusted-mutual-information attribute selection heuristic.

pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod oracles;

pub use error::{Error, Result};
