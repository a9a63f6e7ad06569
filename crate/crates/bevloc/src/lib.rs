//! Retrieval-based LiDAR localization at desk scale.
//!
//! The crate covers the whole pipeline: a deterministic synthetic city and
//! sweep simulator, BEV voxelization, descriptor extraction (pooled BEV
//! statistics, VLAD over a k-means vocabulary, and a learned embedding
//! head), geo-constrained triplet mining with metric-learning training,
//! exact and GPS-restricted nearest-neighbour retrieval, two evaluation
//! protocols, and metadata-vs-error analysis.
//!
//! Everything is deterministic given a master seed: parallel workers draw
//! from independent derived streams, so thread counts never change output.

pub mod analysis;
pub mod bev;
pub mod cloud;
pub mod config;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod geom;
pub mod index;
pub mod learn;
pub mod pipeline;
pub mod seeds;
pub mod spatial;
pub mod synth;

pub use cloud::{Point, PointCloud};
pub use descriptor::Descriptor;
pub use error::{Error, Result};
pub use geom::{GpsFix, Pose};
