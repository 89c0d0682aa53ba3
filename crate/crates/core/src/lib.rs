//! Coarse 3D building priors from OpenStreetMap footprints and satellite
//! tiles, with latent normalization, cosine prior/noise interpolation and a
//! rectified-flow sampler over a small trainable velocity model.

pub mod error;
pub mod flow;
pub mod geo;
pub mod geometry;
pub mod latent;
pub mod metrics;
pub mod pipeline;
pub mod tiles;
pub mod transport;
pub mod voxel;

pub use error::{Error, Result};
