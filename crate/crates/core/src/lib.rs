//! Differentiable trilinear point splatting for radiance field rendering.
//!
//! Points carrying learned feature descriptors are rasterized into a
//! screen-space image pyramid (each point is written bilinearly into the 2x2
//! pixel footprints of the two resolution layers bracketing its projected
//! size), blended front-to-back per pixel, fused into a full-resolution image
//! by a small gated-convolution decoder, optionally shaded with degree-2
//! spherical harmonics, and tone mapped. Every stage has a hand-written
//! backward pass, so all scene parameters (positions, sizes, opacities,
//! descriptors, camera poses, network and tone-map weights) can be optimized
//! by gradient descent against input photographs.

pub mod decoder;
pub mod error;
pub mod io;
pub mod parallel;
pub mod pipeline;
pub mod raster;
pub mod scene;
pub mod shading;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::scalar::{sc, Scalar};
pub use tensor::Tensor;
