//! Speech-driven mesh animation supervised by a sliced optimal-transport
//! loss: Chebyshev graph convolution on triangle meshes, QEM resampling
//! hierarchies, varifold measures with a sliced Wasserstein distance, and a
//! small encoder–decoder trainer with masked vertex-error metrics.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod mesh;
pub mod model;
pub mod oracle;
pub mod ot;
pub mod ottk;
pub mod resample;
pub mod seed;
pub mod selftest;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
