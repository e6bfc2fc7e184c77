//! Online continual-learning engine for joint depth and panoptic perception.
//!
//! The crate drives a small differentiable multi-head model through an
//! online adaptation loop: fixed-size replay buffers with rare-class and
//! diversity sampling, cross-domain mixing with pseudo-labels from an EMA
//! teacher, unsupervised photometric depth losses, and the three evaluation
//! protocols (adapt / eval / source-retention).
//!
//! All numeric code is generic over the scalar type via [`scalar::Real`];
//! concrete aliases for the common instantiations live at the crate root.

pub mod data;
pub mod engine;
pub mod error;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod mixing;
pub mod model;
pub mod replay;
pub mod scalar;

pub mod cli;

pub use error::{CodepsError, Result};
pub use scalar::Real;

/// Default scalar used by the engine and CLI.
pub type Scalar = f32;

pub type ImageF32 = imaging::ImageTensor<f32>;
pub type ImageF64 = imaging::ImageTensor<f64>;
pub type DepthF32 = imaging::DepthMap<f32>;
pub type DepthF64 = imaging::DepthMap<f64>;
pub type IntrinsicsF32 = imaging::CameraIntrinsics<f32>;
pub type IntrinsicsF64 = imaging::CameraIntrinsics<f64>;
pub type ModelF32 = model::ModelState<f32>;
pub type ModelF64 = model::ModelState<f64>;
