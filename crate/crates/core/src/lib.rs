//! Sparse temporal local attention for LiDAR point-cloud sequences.
//!
//! Frames are partitioned on a cylindrical grid ([`sparse_grid`]), past frames
//! are aligned into the current sensor frame ([`geometry`]), every occupied
//! current voxel looks up its `k` nearest occupied voxels in each past frame
//! ([`neighborhood`]) and attends over them ([`attention`]). [`losses`] and
//! [`metrics`] cover training and evaluation. [`synthetic`], [`model`],
//! [`train`], [`experiment`] and [`bench`] make up the desk-scale training
//! and benchmarking harness driven by the `stela` binary.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod kitti_io;
pub mod losses;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod neighborhood;
pub mod report;
pub mod sparse_grid;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
