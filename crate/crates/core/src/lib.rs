//! Hierarchical image geolocation: adaptive geo-cells, a two-branch
//! (RGB + segmentation) transformer with multi-modal feature fusion,
//! training and evaluation.

mod error;

pub mod cells;
pub mod config;
pub mod eval;
pub mod geom;
pub mod model;
pub mod rngs;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
