//! Distortion-aware radial image pipeline for wide-angle depth estimation.
//!
//! The crate covers lens projection, the radial sampling-function search,
//! polar tokenization with k-NN reconstruction, fisheye dataset synthesis,
//! depth metrics, a small reverse-mode autodiff engine and the radial
//! encoder-decoder built on top of it.

pub mod data;
pub mod error;
pub mod imageio;
pub mod lens;
pub mod metrics;
pub mod model;
pub mod polar_grid;
pub mod sampling;
pub mod tensor;

pub use error::{Error, Result};
pub use lens::{LensMeta, LensModel};

pub use polar_grid::{GridSpec, KnnIndex, PolarGrid};
pub use sampling::{GFunction, RadialProfile, SearchGrid};
