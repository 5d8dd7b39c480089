//! Core numerics for geometry-aware 3D view prediction and voxelwise
//! encoding-model benchmarks.
//!
//! The crate is `no_std` (with `alloc`) so every algorithm here is a pure
//! function of its inputs: camera geometry and voxel-grid lifting/warping
//! ([`geometry`]), a small trainable 3D convolutional encoder with a
//! view-contrastive objective ([`featmodel`]), PCA + cross-validated ridge
//! regression with noise-ceiling metrics ([`encoding`]), ROI aggregation and
//! paired statistics ([`roistats`]), and analytic scene/response synthesis
//! ([`synth`]). File formats, configuration, and the CLI live in the
//! companion `geovoxel` crate.
//!
//! All floating-point math routes through `libm` so results are identical
//! with or without the standard library, and all randomness flows through
//! the seeded generator in [`rng`].

#![cfg_attr(not(test), no_std)]

extern crate alloc;

mod fmath;

pub mod encoding;
pub mod featmodel;
pub mod geometry;
pub mod linalg;
pub mod rng;
pub mod roistats;
pub mod synth;
