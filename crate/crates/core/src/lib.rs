//! Point-cloud transformer on sparse voxel grids with disassembled
//! plane-window attention, contextual relative position encoding, and
//! sparse-convolution local structure enhancement. Every layer carries a
//! hand-written backward pass.
//!
//! All numeric code is generic over [`Scalar`] (`f32` / `f64`); the `*64`
//! and `*32` aliases below pin the common instantiations.

pub mod attention;
pub mod cli;
pub mod conv;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{FeatureMatrix, Matrix};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type PointCloud64 = geometry::PointCloud<f64>;
pub type PointCloud32 = geometry::PointCloud<f32>;
pub type Sample64 = model::Sample<f64>;
pub type Sample32 = model::Sample<f32>;
