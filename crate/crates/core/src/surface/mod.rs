//! Oriented normals, watertight mesh reconstruction, and mesh export.
//!
//! The final cloud becomes a triangle mesh in three steps: estimate a
//! consistently oriented normal per point, reconstruct the implicit surface
//! (either the built-in signed-distance mesher or an external tool invoked
//! through a command template), and export as binary STL or PLY.

mod mesh;
mod normals;
mod reconstruct;

pub use mesh::{
    check_watertight, export_mesh, import_mesh, read_ply_mesh, read_stl_mesh, write_ply_cloud,
    TriangleMesh, WatertightReport,
};
pub use normals::estimate_normals;
pub use reconstruct::{reconstruct_builtin, reconstruct_external};

use crate::error::{Error, Result};
use crate::geom::PointCloud;

/// A point cloud with one unit normal per point.
#[derive(Debug, Clone)]
pub struct OrientedCloud {
    pub points: PointCloud,
    /// Unit normals, index-aligned with `points.points`.
    pub normals: Vec<[f64; 3]>,
}

impl OrientedCloud {
    /// Checks the index alignment and that every normal is unit length
    /// within 1e-6.
    pub fn validate(&self) -> Result<()> {
        if self.normals.len() != self.points.points.len() {
            return Err(Error::Data(format!(
                "oriented cloud has {} points but {} normals",
                self.points.points.len(),
                self.normals.len()
            )));
        }
        for (i, n) in self.normals.iter().enumerate() {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if (len - 1.0).abs() > 1e-6 {
                return Err(Error::Data(format!(
                    "normal {i} has length {len}, expected unit"
                )));
            }
        }
        Ok(())
    }
}
