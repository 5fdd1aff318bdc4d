//! Cloud merging to homogeneous resolution and part segmentation.
//!
//! Aligned passes oversample double-covered regions; a box grid filter
//! replaces all points inside each cube with their centroid so density no
//! longer depends on coverage. Segmentation then removes everything that is
//! not the part: Euclidean clustering splits the merged cloud into connected
//! components and only components holding a point near a registration target
//! survive, which drops the fixture and stray debris without any shape model.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::detect::Target;
use crate::error::{Error, Result};
use crate::geom::{Frame, Point3, PointCloud};
use crate::spatial::UnionFind;

/// Per-cube accumulator for the box grid filter.
#[derive(Default)]
struct CellSum {
    pos: Vector3<f64>,
    count: usize,
    intensity: f64,
    intensity_count: usize,
}

fn cell_key(p: &Point3, min: &Vector3<f64>, voxel: f64) -> (i64, i64, i64) {
    (
        ((p.x - min.x) / voxel).floor() as i64,
        ((p.y - min.y) / voxel).floor() as i64,
        ((p.z - min.z) / voxel).floor() as i64,
    )
}

/// Merges aligned clouds into one point per occupied cube: space is split
/// into axis-aligned cubes of side `voxel_size` anchored at the global
/// minimum corner, and every occupied cube contributes the centroid of its
/// members (intensity averaged over the members that carry one). The output
/// is sorted by cube index, so it is deterministic for a given input set and
/// independent of cloud concatenation order up to floating-point summation.
pub fn box_grid_merge(clouds: &[PointCloud], voxel_size: f64) -> Result<PointCloud> {
    if !(voxel_size.is_finite() && voxel_size > 0.0) {
        return Err(Error::Config(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    let frame = clouds.first().map_or(Frame::Reference, |c| c.frame);
    if clouds.iter().any(|c| c.frame != frame) {
        return Err(Error::Data(
            "clouds in different frames cannot be merged; align them first".into(),
        ));
    }

    let mut min = Vector3::repeat(f64::INFINITY);
    for c in clouds {
        for p in &c.points {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            min.z = min.z.min(p.z);
        }
    }
    if !min.x.is_finite() {
        return Ok(PointCloud::new(Vec::new(), None, frame));
    }

    let mut cells: HashMap<(i64, i64, i64), CellSum> = HashMap::new();
    for c in clouds {
        for p in &c.points {
            let cell = cells.entry(cell_key(p, &min, voxel_size)).or_default();
            cell.pos += Vector3::new(p.x, p.y, p.z);
            cell.count += 1;
            if let Some(i) = p.intensity {
                cell.intensity += i;
                cell.intensity_count += 1;
            }
        }
    }

    let mut keys: Vec<(i64, i64, i64)> = cells.keys().copied().collect();
    keys.sort_unstable();
    let points = keys
        .into_iter()
        .map(|k| {
            let cell = &cells[&k];
            let pos = cell.pos / cell.count as f64;
            Point3 {
                x: pos.x,
                y: pos.y,
                z: pos.z,
                intensity: (cell.intensity_count > 0)
                    .then(|| cell.intensity / cell.intensity_count as f64),
            }
        })
        .collect();
    Ok(PointCloud::new(points, None, frame))
}

/// Offsets covering half of the 26-neighbourhood plus pairs within one cell,
/// so every unordered cell pair is visited exactly once.
const HALF_NEIGHBOURS: [(i64, i64, i64); 13] = [
    (1, 0, 0),
    (-1, 1, 0),
    (0, 1, 0),
    (1, 1, 0),
    (-1, -1, 1),
    (0, -1, 1),
    (1, -1, 1),
    (-1, 0, 1),
    (0, 0, 1),
    (1, 0, 1),
    (-1, 1, 1),
    (0, 1, 1),
    (1, 1, 1),
];

/// Splits the cloud into Euclidean clusters (points are connected when some
/// hop chain with steps <= `cluster_radius` joins them) and keeps the union
/// of the clusters that contain at least one point within `keep_radius` of
/// any target centre. Kept points preserve input order. Errors when no
/// cluster qualifies, which indicates the targets and the cloud are not in
/// the same frame.
pub fn segment_keep_part(
    c: &PointCloud,
    targets: &[Target],
    cluster_radius: f64,
    keep_radius: f64,
) -> Result<PointCloud> {
    if targets.is_empty() {
        return Err(Error::Config(
            "segmentation needs at least one target to identify the part".into(),
        ));
    }
    if !(cluster_radius.is_finite() && cluster_radius > 0.0) {
        return Err(Error::Config(format!(
            "cluster radius must be positive, got {cluster_radius}"
        )));
    }
    if !(keep_radius.is_finite() && keep_radius > 0.0) {
        return Err(Error::Config(format!(
            "keep radius must be positive, got {keep_radius}"
        )));
    }
    let centres: Vec<Vector3<f64>> = targets
        .iter()
        .map(|t| t.center().map(Vector3::from))
        .collect::<Result<_>>()?;
    if c.points.is_empty() {
        return Err(Error::Data(
            "no cluster lies near any target: the cloud is empty".into(),
        ));
    }

    // Grid hash at the hop radius: any pair within cluster_radius shares a
    // cell or sits in adjacent cells.
    let origin = Vector3::new(c.points[0].x, c.points[0].y, c.points[0].z);
    let key = |p: &Point3| {
        (
            ((p.x - origin.x) / cluster_radius).floor() as i64,
            ((p.y - origin.y) / cluster_radius).floor() as i64,
            ((p.z - origin.z) / cluster_radius).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in c.points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }

    let r2 = cluster_radius * cluster_radius;
    let d2 = |a: usize, b: usize| {
        let (pa, pb) = (&c.points[a], &c.points[b]);
        (pa.x - pb.x).powi(2) + (pa.y - pb.y).powi(2) + (pa.z - pb.z).powi(2)
    };
    let mut uf = UnionFind::new(c.points.len());
    for (&cell, bucket) in &grid {
        for (bi, &i) in bucket.iter().enumerate() {
            for &j in &bucket[bi + 1..] {
                if d2(i, j) <= r2 {
                    uf.union(i, j);
                }
            }
        }
        for (dx, dy, dz) in HALF_NEIGHBOURS {
            let Some(other) = grid.get(&(cell.0 + dx, cell.1 + dy, cell.2 + dz)) else {
                continue;
            };
            for &i in bucket {
                for &j in other {
                    if d2(i, j) <= r2 {
                        uf.union(i, j);
                    }
                }
            }
        }
    }

    // A cluster qualifies when any of its points lies within keep_radius of
    // any target centre; scan the cells overlapping each target ball.
    let mut kept_roots: HashMap<usize, ()> = HashMap::new();
    let reach = (keep_radius / cluster_radius).ceil() as i64;
    let k2 = keep_radius * keep_radius;
    for ctr in &centres {
        let ck = key(&Point3::new(ctr.x, ctr.y, ctr.z));
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let Some(bucket) = grid.get(&(ck.0 + dx, ck.1 + dy, ck.2 + dz)) else {
                        continue;
                    };
                    for &i in bucket {
                        let p = &c.points[i];
                        let dd = (p.x - ctr.x).powi(2)
                            + (p.y - ctr.y).powi(2)
                            + (p.z - ctr.z).powi(2);
                        if dd <= k2 {
                            kept_roots.insert(uf.find(i), ());
                        }
                    }
                }
            }
        }
    }
    if kept_roots.is_empty() {
        return Err(Error::Data(format!(
            "no cluster lies within {keep_radius} mm of any of the {} targets; \
             the cloud and the targets appear to be in different frames",
            centres.len()
        )));
    }

    let points: Vec<Point3> = c
        .points
        .iter()
        .enumerate()
        .filter(|(i, _)| kept_roots.contains_key(&uf.find(*i)))
        .map(|(_, p)| *p)
        .collect();
    Ok(PointCloud::new(points, c.scan_id.clone(), c.frame))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::ScanId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: Vec<Point3>) -> PointCloud {
        PointCloud::new(points, None, Frame::Reference)
    }

    fn target_at(x: f64, y: f64, z: f64) -> Target {
        Target {
            scan_id: ScanId::new("t"),
            center3d: Some([x, y, z]),
            center_px: (0.0, 0.0),
            radius_px: 4.0,
            radius_mm: 2.0,
            confidence: 1.0,
        }
    }

    #[test]
    fn identical_points_merge_to_one() {
        let c = cloud(vec![Point3::new(1.0, 2.0, 3.0), Point3::new(1.0, 2.0, 3.0)]);
        let merged = box_grid_merge(&[c], 0.1).unwrap();
        assert_eq!(merged.points.len(), 1);
        let p = merged.points[0];
        assert_eq!((p.x, p.y, p.z), (1.0, 2.0, 3.0));
    }

    #[test]
    fn near_points_merge_to_centroid() {
        let c = cloud(vec![Point3::new(0.0, 0.0, 0.0), Point3::new(0.04, 0.0, 0.0)]);
        let merged = box_grid_merge(&[c], 0.1).unwrap();
        assert_eq!(merged.points.len(), 1);
        assert!((merged.points[0].x - 0.02).abs() < 1e-15);
    }

    #[test]
    fn intensity_averages_over_points_that_carry_it() {
        let c = cloud(vec![
            Point3::with_intensity(0.0, 0.0, 0.0, 0.2),
            Point3::with_intensity(0.01, 0.0, 0.0, 0.4),
            Point3::new(0.02, 0.0, 0.0),
        ]);
        let merged = box_grid_merge(&[c], 0.1).unwrap();
        assert_eq!(merged.points.len(), 1);
        assert!((merged.points[0].intensity.unwrap() - 0.3).abs() < 1e-15);

        let no_i = cloud(vec![Point3::new(0.0, 0.0, 0.0), Point3::new(0.01, 0.0, 0.0)]);
        let merged = box_grid_merge(&[no_i], 0.1).unwrap();
        assert!(merged.points[0].intensity.is_none());
    }

    #[test]
    fn double_covered_plane_reaches_single_coverage_density() {
        // Two rasters at 0.05 mm pitch, the second shifted by a quarter
        // pitch: every 0.1 mm cube holds samples from both, yet exactly one
        // point per cube comes out, i.e. one point per 0.01 mm^2 of plane.
        let mut a = Vec::new();
        let mut b = Vec::new();
        for r in 0..200 {
            for c in 0..200 {
                let (x, y) = (c as f64 * 0.05, r as f64 * 0.05);
                a.push(Point3::new(x, y, 0.0));
                b.push(Point3::new(x + 0.0125, y + 0.0125, 0.0));
            }
        }
        let merged = box_grid_merge(&[cloud(a), cloud(b)], 0.1).unwrap();
        let cells_per_axis = 100usize;
        assert_eq!(merged.points.len(), cells_per_axis * cells_per_axis);
    }

    #[test]
    fn every_input_point_is_within_half_cube_diagonal_of_an_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point3> = (0..500)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let voxel = 0.1;
        let merged = box_grid_merge(&[cloud(pts.clone())], voxel).unwrap();
        let bound = voxel * 3.0f64.sqrt() / 2.0 + 1e-12;
        for p in &pts {
            let nearest = merged
                .points
                .iter()
                .map(|q| {
                    ((p.x - q.x).powi(2) + (p.y - q.y).powi(2) + (p.z - q.z).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            assert!(nearest <= bound, "point {nearest} away from closest output");
        }
    }

    #[test]
    fn outputs_occupy_distinct_cubes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Point3> = (0..800)
            .map(|_| {
                Point3::new(
                    rng.random_range(0.0..2.0),
                    rng.random_range(0.0..2.0),
                    rng.random_range(0.0..0.2),
                )
            })
            .collect();
        let voxel = 0.1;
        let merged = box_grid_merge(&[cloud(pts.clone())], voxel).unwrap();
        let mut min = Vector3::repeat(f64::INFINITY);
        for p in &pts {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            min.z = min.z.min(p.z);
        }
        let mut seen = std::collections::HashSet::new();
        for p in &merged.points {
            assert!(seen.insert(cell_key(p, &min, voxel)), "two outputs in one cube");
        }
    }

    #[test]
    fn merge_is_concatenation_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let make = |rng: &mut ChaCha8Rng| {
            cloud(
                (0..300)
                    .map(|_| {
                        Point3::with_intensity(
                            rng.random_range(0.0..1.0),
                            rng.random_range(0.0..1.0),
                            rng.random_range(0.0..1.0),
                            rng.random_range(0.0..1.0),
                        )
                    })
                    .collect(),
            )
        };
        let (a, b, c) = (make(&mut rng), make(&mut rng), make(&mut rng));
        let abc = box_grid_merge(&[a.clone(), b.clone(), c.clone()], 0.1).unwrap();
        let cba = box_grid_merge(&[c, b, a], 0.1).unwrap();
        assert_eq!(abc.points.len(), cba.points.len());
        // Same sorted cell order on both sides, so points align index-wise.
        for (p, q) in abc.points.iter().zip(&cba.points) {
            assert!((p.x - q.x).abs() < 1e-9);
            assert!((p.y - q.y).abs() < 1e-9);
            assert!((p.z - q.z).abs() < 1e-9);
            assert!((p.intensity.unwrap() - q.intensity.unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn mixed_frames_are_rejected() {
        let a = PointCloud::new(vec![Point3::new(0.0, 0.0, 0.0)], None, Frame::Reference);
        let b = PointCloud::new(vec![Point3::new(1.0, 0.0, 0.0)], None, Frame::ScannerLocal);
        assert!(box_grid_merge(&[a, b], 0.1).is_err());
    }

    /// Brute-force clustering oracle: BFS over the full distance matrix.
    fn brute_clusters(pts: &[Point3], radius: f64) -> Vec<usize> {
        let n = pts.len();
        let mut label = vec![usize::MAX; n];
        let mut next = 0;
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            let mut queue = vec![start];
            label[start] = next;
            while let Some(i) = queue.pop() {
                for j in 0..n {
                    if label[j] != usize::MAX {
                        continue;
                    }
                    let dd = (pts[i].x - pts[j].x).powi(2)
                        + (pts[i].y - pts[j].y).powi(2)
                        + (pts[i].z - pts[j].z).powi(2);
                    if dd <= radius * radius {
                        label[j] = next;
                        queue.push(j);
                    }
                }
            }
            next += 1;
        }
        label
    }

    #[test]
    fn segmentation_matches_brute_force_clustering_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            // Random blobs plus scattered noise, random keep target.
            let mut pts = Vec::new();
            for _ in 0..4 {
                let cx = rng.random_range(-20.0..20.0);
                let cy = rng.random_range(-20.0..20.0);
                for _ in 0..60 {
                    pts.push(Point3::new(
                        cx + rng.random_range(-1.0..1.0),
                        cy + rng.random_range(-1.0..1.0),
                        rng.random_range(-0.2..0.2),
                    ));
                }
            }
            for _ in 0..30 {
                pts.push(Point3::new(
                    rng.random_range(-25.0..25.0),
                    rng.random_range(-25.0..25.0),
                    rng.random_range(-5.0..5.0),
                ));
            }
            let radius = 0.8;
            let keep = 2.0;
            let labels = brute_clusters(&pts, radius);
            let anchor = rng.random_range(0..pts.len());
            let t = target_at(pts[anchor].x, pts[anchor].y, pts[anchor].z);

            // Oracle: clusters with any point within keep of the target.
            let mut keep_labels = std::collections::HashSet::new();
            for (i, p) in pts.iter().enumerate() {
                let dd = (p.x - pts[anchor].x).powi(2)
                    + (p.y - pts[anchor].y).powi(2)
                    + (p.z - pts[anchor].z).powi(2);
                if dd <= keep * keep {
                    keep_labels.insert(labels[i]);
                }
            }
            let want: Vec<Point3> = pts
                .iter()
                .enumerate()
                .filter(|(i, _)| keep_labels.contains(&labels[*i]))
                .map(|(_, p)| *p)
                .collect();

            let got = segment_keep_part(&cloud(pts.clone()), &[t], radius, keep).unwrap();
            assert_eq!(got.points.len(), want.len());
            for (g, w) in got.points.iter().zip(&want) {
                assert_eq!((g.x, g.y, g.z), (w.x, w.y, w.z));
            }
        }
    }

    #[test]
    fn fixture_cluster_without_target_is_removed() {
        let mut part = Vec::new();
        let mut fixture = Vec::new();
        for i in 0..50 {
            part.push(Point3::new(i as f64 * 0.1, 0.0, 0.0));
            fixture.push(Point3::new(i as f64 * 0.1 + 50.0, 0.0, 0.0));
        }
        let mut all = part.clone();
        all.extend_from_slice(&fixture);
        let t = target_at(2.0, 0.0, 0.0);
        let kept = segment_keep_part(&cloud(all), &[t], 0.2, 5.0).unwrap();
        assert_eq!(kept.points.len(), part.len());
        assert!(kept.points.iter().all(|p| p.x < 10.0));
    }

    #[test]
    fn separate_clusters_with_their_own_targets_are_both_kept() {
        let mut pts = Vec::new();
        for i in 0..40 {
            pts.push(Point3::new(i as f64 * 0.1, 0.0, 0.0));
            pts.push(Point3::new(i as f64 * 0.1 + 30.0, 10.0, 0.0));
        }
        let targets = [target_at(1.0, 0.0, 0.0), target_at(31.0, 10.0, 0.0)];
        let kept = segment_keep_part(&cloud(pts.clone()), &targets, 0.2, 5.0).unwrap();
        assert_eq!(kept.points.len(), pts.len());
    }

    #[test]
    fn no_qualifying_cluster_is_an_error() {
        let pts = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(0.1, 0.0, 0.0)];
        let t = target_at(500.0, 500.0, 500.0);
        let err = segment_keep_part(&cloud(pts), &[t], 0.2, 5.0).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn no_targets_is_a_config_error() {
        let pts = vec![Point3::new(0.0, 0.0, 0.0)];
        assert!(matches!(
            segment_keep_part(&cloud(pts), &[], 0.2, 5.0),
            Err(Error::Config(_))
        ));
    }
}
