//! Directional privacy for gradient descent.
//!
//! The crate implements von Mises-Fisher (VMF) directional noise for
//! per-example gradients alongside the Gaussian DP-SGD baseline, two gradient
//! inversion attacks used to measure what the noise protects, and the metrics
//! and experiment harness that tie them together.

pub mod attack;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod rng;
pub mod sphere;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use noise::{GaussParams, VmfParams};
pub use rng::RngStream;
pub use sphere::UnitVector;
pub use tensor::{FlatVector, ImageTensor};
