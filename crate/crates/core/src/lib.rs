//! Dynamic-scene reconstruction with deformable 3D Gaussians.
//!
//! A canonical [`scene::GaussianSet`] is deformed per timestep by a
//! multi-resolution HexPlane field ([`field::HexPlaneField`]) that predicts
//! position and colour offsets plus a semantic feature per Gaussian. The
//! result is rendered with a differentiable tile rasterizer
//! ([`render`]) and optimized end to end by [`train`].

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod field;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
