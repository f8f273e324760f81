//! Geometry-aware self-corrective reconstruction on procedural scenes.
//!
//! A triplane reconstructor encodes posed views with a camera-conditioned
//! vision transformer, renders its own depth and normals, re-encodes them
//! with a geometry encoder and fuses both token sets through a zero-initialized
//! residual network before decoding a refined triplane.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geofuser;
pub mod gradcheck;
pub mod grid;
pub mod image;
pub mod kernels;
pub mod loss;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod scenekit;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod triplane;
pub mod util;

pub use error::{Error, Result};
pub use tensor::Tensor;
