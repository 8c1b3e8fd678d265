//! Core of the synthpose toolchain.
//!
//! A keypoint-level parametric body model, a pinhole camera, ray-cast
//! occlusion labeling, a deterministic synthetic sequence engine, the 3D
//! keypoint fitter that recovers body parameters from keypoint sequences,
//! a quality gate, and evaluation metrics.
//!
//! Batch entry points in [`exec`] run on rayon when the `parallel` feature is
//! enabled (the default) and fall back to plain iterators otherwise. Results
//! are identical in both modes.

pub mod analyser;
pub mod body;
pub mod camera;
pub mod error;
pub mod exec;
pub mod fit;
pub mod io;
pub mod metrics;
pub mod rotation;
pub mod scene;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};

/// 3-vector of `f64`, used for points, translations and axis-angle rotations.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 3x3 matrix of `f64`.
pub type Mat3 = nalgebra::Matrix3<f64>;
