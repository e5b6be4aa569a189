//! Shape-prior injection for amodal segmentation, gated by the signed
//! distance to the visible region.
//!
//! The crate is organized bottom-up: [`tensor`] provides a reverse-mode tape,
//! [`geometry`] binary masks and exact distance transforms, [`synthdata`] the
//! procedural occlusion scenes, [`model`] the network, [`training`] the loss and
//! optimizer loop, [`evalkit`] metrics and ablations, and [`probe`] the linear
//! geometry probe.

pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod model;
pub mod pgm;
pub mod probe;
pub mod seed;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{GraspError, Result};

/// Version tag embedded in every artifact.
pub const VERSION: &str = concat!("grasp ", env!("CARGO_PKG_VERSION"));
