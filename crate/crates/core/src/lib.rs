//! Digital reconstruction of welded parts from overlapping line-scanner passes.
//!
//! The library turns a set of raster line scans (range + backscatter
//! intensity) into a single watertight-candidate triangle mesh:
//!
//! 1. ingest: parse scan files into point clouds plus pixel-addressable
//!    range images, with nominal poses from the scan trajectory;
//! 2. denoise: statistical outlier removal on each pass;
//! 3. detect: find circular reference targets in the intensity images and
//!    lift their centres to 3D through the pixel-to-point dictionary;
//! 4. register: match targets across overlapping passes, estimate pairwise
//!    rigid motions, then refine all poses jointly;
//! 5. merge and segment: fuse the aligned passes on a box grid and keep the
//!    clusters that carry targets;
//! 6. surface: estimate oriented normals and reconstruct a triangle mesh,
//!    either built-in (signed distance + marching cubes) or through an
//!    external tool, exported as binary STL or PLY.
//!
//! All lengths are millimetres. Every randomised step takes an explicit seed
//! so a pipeline run is reproducible byte for byte.

pub mod config;
pub mod denoise;
pub mod detect;
pub mod error;
pub mod geom;
pub mod ingest;
pub mod merge;
pub mod pipeline;
pub mod register;
pub mod spatial;
pub mod surface;
pub mod synth;

pub use error::{Error, Result};
pub use geom::{Frame, Point3, PointCloud, RigidTransform, ScanId, ScanPose};
