//! File formats, configuration, pipeline stages, and report emission for the
//! geometry-aware view-prediction and voxelwise encoding benchmark.
//!
//! All numerics live in `geovoxel-core`; this crate adds the std-side glue:
//! the tensor container format, the JSON run configuration, deterministic
//! chunked threading, the staged pipeline, and CSV/JSON reports. The
//! `geovoxel` binary exposes each stage as a subcommand.

pub mod config;
pub mod container;
pub mod pipeline;
pub mod report;
pub mod threads;
