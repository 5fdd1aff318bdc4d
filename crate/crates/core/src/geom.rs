//! Geometric primitives shared by every pipeline stage.
//!
//! All coordinates and lengths are millimetres. Rotations are proper
//! (orthonormal, determinant +1); rigidity is validated at construction
//! boundaries and preserved by composition to within [`RIGID_TOL`].

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on orthonormality and determinant for a valid rigid transform.
pub const RIGID_TOL: f64 = 1e-9;

/// Identifier of the scanner pass a point, image, or pose originates from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScanId(String);

impl ScanId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for ScanId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ScanId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for ScanId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

/// Coordinate frame a cloud currently lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Frame {
    /// Raw scanner coordinates of a single pass.
    ScannerLocal,
    /// After applying the nominal pose from the scan trajectory.
    CoarseAligned,
    /// After target-based refinement; the common output frame.
    Reference,
}

/// One 3D sample with an optional backscatter intensity in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Unitless backscatter; `None` for derived clouds that lost it.
    pub intensity: Option<f64>,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            x,
            y,
            z,
            intensity: None,
        }
    }

    pub fn with_intensity(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self {
            x,
            y,
            z,
            intensity: Some(intensity),
        }
    }

    pub fn pos(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn dist(&self, other: &Point3) -> f64 {
        (self.pos() - other.pos()).norm()
    }
}

/// Unordered point collection tagged with provenance and frame.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    /// Originating pass; `None` for merged clouds.
    pub scan_id: Option<ScanId>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, scan_id: Option<ScanId>, frame: Frame) -> Self {
        Self {
            points,
            scan_id,
            frame,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Positions as plain arrays, the layout the spatial index consumes.
    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| [p.x, p.y, p.z]).collect()
    }

    /// Axis-aligned bounds as (min, max), or `None` when empty.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        if self.points.is_empty() {
            return None;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for (axis, v) in [p.x, p.y, p.z].into_iter().enumerate() {
                lo[axis] = lo[axis].min(v);
                hi[axis] = hi[axis].max(v);
            }
        }
        Some((lo, hi))
    }

    /// A copy with every point moved by `t` and the frame label replaced.
    pub fn transformed(&self, t: &RigidTransform, frame: Frame) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply_point(p)).collect(),
            scan_id: self.scan_id.clone(),
            frame,
        }
    }
}

/// A proper rigid motion: `x -> rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform after checking orthonormality and determinant
    /// within [`RIGID_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        let dev = t.rigidity_deviation();
        if !dev.is_finite() || dev > RIGID_TOL {
            return Err(Error::Degenerate(format!(
                "rotation is not orthonormal with det +1 (deviation {dev:.3e})"
            )));
        }
        Ok(t)
    }

    /// For transforms produced by operations that preserve rigidity by
    /// construction; checked only in debug builds.
    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let t = Self {
            rotation,
            translation,
        };
        debug_assert!(
            t.rigidity_deviation() <= RIGID_TOL,
            "non-rigid transform: deviation {:.3e}",
            t.rigidity_deviation()
        );
        t
    }

    /// Exponential-map construction from a rotation vector (axis * angle,
    /// radians) and a translation.
    pub fn from_rotvec(w: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::from_parts_unchecked(Rotation3::from_scaled_axis(w).into_inner(), translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Rotation vector (axis * angle) of the rotation part.
    pub fn rotvec(&self) -> Vector3<f64> {
        Rotation3::from_matrix_unchecked(self.rotation).scaled_axis()
    }

    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        let q = self.apply(p.pos());
        Point3 {
            x: q.x,
            y: q.y,
            z: q.z,
            intensity: p.intensity,
        }
    }

    /// `self.compose(other)` applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self::from_parts_unchecked(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::from_parts_unchecked(rt, -(rt * self.translation))
    }

    /// Angle in radians between the rotation parts of two transforms.
    pub fn rotation_angle_from(&self, other: &Self) -> f64 {
        let rel = self.rotation * other.rotation.transpose();
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Largest deviation from orthonormality / unit determinant; zero for an
    /// exact rigid transform.
    pub fn rigidity_deviation(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation;
        let ortho = (gram - Matrix3::identity()).abs().max();
        let det = (self.rotation.determinant() - 1.0).abs();
        ortho.max(det)
    }
}

/// The pose of one pass: maps its scanner-local coordinates into a common
/// frame (nominal trajectory pose before refinement, refined pose after).
#[derive(Debug, Clone)]
pub struct ScanPose {
    pub scan_id: ScanId,
    pub pose: RigidTransform,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rz(angle: f64) -> Matrix3<f64> {
        let (s, c) = angle.sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn compose_two_quarter_turns_is_half_turn() {
        let quarter =
            RigidTransform::new(rz(std::f64::consts::FRAC_PI_2), Vector3::zeros()).unwrap();
        let half = quarter.compose(&quarter);
        // Direct matrix product oracle: Rz(90) * Rz(90) = Rz(180).
        let expected = rz(std::f64::consts::PI);
        assert_abs_diff_eq!(half.rotation(), &expected, epsilon = 1e-12);
        assert_abs_diff_eq!(half.translation(), &Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn new_rejects_non_orthonormal_rotation() {
        let mut m = Matrix3::identity();
        m[(0, 0)] = 1.0 + 1e-6;
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn new_rejects_reflection() {
        let mut m = Matrix3::identity();
        m[(2, 2)] = -1.0;
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn rotvec_round_trip() {
        let w = Vector3::new(0.3, -0.2, 0.9);
        let t = RigidTransform::from_rotvec(w, Vector3::new(1.0, 2.0, 3.0));
        assert_abs_diff_eq!(t.rotvec(), w, epsilon = 1e-12);
    }

    #[test]
    fn identity_rotation_angle_is_zero() {
        let id = RigidTransform::identity();
        assert_eq!(id.rotation_angle_from(&id), 0.0);
    }

    prop_compose! {
        fn arb_rigid()(
            wx in -3.0f64..3.0, wy in -3.0f64..3.0, wz in -3.0f64..3.0,
            tx in -100.0f64..100.0, ty in -100.0f64..100.0, tz in -100.0f64..100.0,
        ) -> RigidTransform {
            RigidTransform::from_rotvec(Vector3::new(wx, wy, wz), Vector3::new(tx, ty, tz))
        }
    }

    prop_compose! {
        fn arb_point()(
            x in -200.0f64..200.0, y in -200.0f64..200.0, z in -200.0f64..200.0,
        ) -> Vector3<f64> {
            Vector3::new(x, y, z)
        }
    }

    proptest! {
        #[test]
        fn compose_is_associative(a in arb_rigid(), b in arb_rigid(), c in arb_rigid(), p in arb_point()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!((left.apply(p) - right.apply(p)).norm() < 1e-9);
        }

        #[test]
        fn apply_preserves_pairwise_distances(t in arb_rigid(), p in arb_point(), q in arb_point()) {
            let before = (p - q).norm();
            let after = (t.apply(p) - t.apply(q)).norm();
            prop_assert!((before - after).abs() < 1e-9);
        }

        #[test]
        fn inverse_round_trips(t in arb_rigid(), p in arb_point()) {
            let back = t.inverse().apply(t.apply(p));
            prop_assert!((back - p).norm() < 1e-9);
        }

        #[test]
        fn composition_stays_rigid(a in arb_rigid(), b in arb_rigid()) {
            prop_assert!(a.compose(&b).rigidity_deviation() <= RIGID_TOL);
        }
    }
}
