//! Statistical outlier removal.
//!
//! Each point gets the mean Euclidean distance to its k nearest neighbours
//! (itself excluded). Points whose mean exceeds mu + alpha * sigma of that
//! statistic are dropped. The statistic is rigid-invariant, so the stage runs
//! in whatever frame the cloud is in; survivors keep their relative order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::spatial::KdTree3;

/// Removes statistical outliers; returns the surviving cloud and the removed
/// indices (ascending, into the input cloud).
pub fn remove_outliers(
    cloud: &PointCloud,
    k_neighbors: usize,
    alpha: f64,
) -> Result<(PointCloud, Vec<usize>)> {
    if k_neighbors == 0 {
        return Err(Error::Config("k_neighbors must be at least 1".into()));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::Config(format!(
            "alpha must be non-negative and finite, got {alpha}"
        )));
    }
    if cloud.len() <= k_neighbors {
        return Err(Error::Data(format!(
            "outlier removal needs more than {k_neighbors} points, cloud has {}",
            cloud.len()
        )));
    }

    let positions = cloud.positions();
    let tree = KdTree3::build(&positions);
    let mean_dist: Vec<f64> = positions
        .par_iter()
        .enumerate()
        .map(|(i, &p)| {
            // k+1 smallest then drop the query point itself; with duplicated
            // coordinates the self entry is identified by index, not rank.
            let mut sum = 0.0;
            let mut taken = 0usize;
            for (j, d) in tree.knn(p, k_neighbors + 1) {
                if j == i {
                    continue;
                }
                if taken == k_neighbors {
                    break;
                }
                sum += d;
                taken += 1;
            }
            sum / taken as f64
        })
        .collect();

    let n = mean_dist.len() as f64;
    let mu = mean_dist.iter().sum::<f64>() / n;
    let var = mean_dist.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / n;
    let threshold = mu + alpha * var.sqrt();

    let mut survivors = Vec::with_capacity(cloud.len());
    let mut removed = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        if mean_dist[i] > threshold {
            removed.push(i);
        } else {
            survivors.push(*p);
        }
    }
    if survivors.is_empty() {
        return Err(Error::Data(
            "outlier removal would drop every point".into(),
        ));
    }
    Ok((
        PointCloud::new(survivors, cloud.scan_id.clone(), cloud.frame),
        removed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Frame, Point3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud_of(points: Vec<Point3>) -> PointCloud {
        PointCloud::new(points, None, Frame::ScannerLocal)
    }

    fn grid_10x10() -> Vec<Point3> {
        let mut pts = Vec::new();
        for r in 0..10 {
            for c in 0..10 {
                pts.push(Point3::new(c as f64, r as f64, 0.0));
            }
        }
        pts
    }

    /// Reference implementation: full pairwise distances, no index.
    fn brute_removed(points: &[Point3], k: usize, alpha: f64) -> Vec<usize> {
        let n = points.len();
        let mut mean = vec![0.0; n];
        for i in 0..n {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| points[i].dist(&points[j]))
                .collect();
            d.sort_by(f64::total_cmp);
            mean[i] = d[..k].iter().sum::<f64>() / k as f64;
        }
        let mu = mean.iter().sum::<f64>() / n as f64;
        let sigma =
            (mean.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / n as f64).sqrt();
        (0..n)
            .filter(|&i| mean[i] > mu + alpha * sigma)
            .collect()
    }

    #[test]
    fn matches_brute_force_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let pts: Vec<Point3> = (0..120)
                .map(|_| {
                    Point3::new(
                        rng.random_range(-10.0..10.0),
                        rng.random_range(-10.0..10.0),
                        rng.random_range(-2.0..2.0),
                    )
                })
                .collect();
            for (k, alpha) in [(4, 1.0), (10, 0.5), (30, 2.0)] {
                let want = brute_removed(&pts, k, alpha);
                let (_, got) = remove_outliers(&cloud_of(pts.clone()), k, alpha).unwrap();
                assert_eq!(got, want, "k={k} alpha={alpha}");
            }
        }
    }

    #[test]
    fn bounded_grid_removes_only_corners_at_alpha_one() {
        // On a bounded 10x10 unit grid with k=4 the corner points have mean
        // neighbour distance (1 + 1 + sqrt(2) + 2) / 4, interior points exactly
        // 1, so the corners are the only points past mu + sigma. Frozen from
        // the brute-force oracle.
        let pts = grid_10x10();
        let want = brute_removed(&pts, 4, 1.0);
        assert_eq!(want, vec![0, 9, 90, 99]);
        let (kept, removed) = remove_outliers(&cloud_of(pts), 4, 1.0).unwrap();
        assert_eq!(removed, want);
        assert_eq!(kept.len(), 96);
    }

    #[test]
    fn bounded_grid_keeps_everything_at_alpha_four() {
        let pts = grid_10x10();
        let (kept, removed) = remove_outliers(&cloud_of(pts), 4, 4.0).unwrap();
        assert!(removed.is_empty());
        assert_eq!(kept.len(), 100);
    }

    #[test]
    fn isolated_far_point_is_removed() {
        let mut pts = grid_10x10();
        pts.push(Point3::new(40.0, 40.0, 0.0));
        let (kept, removed) = remove_outliers(&cloud_of(pts.clone()), 4, 1.0).unwrap();
        assert!(removed.contains(&100), "far point must go, got {removed:?}");
        assert_eq!(removed, brute_removed(&pts, 4, 1.0));
        assert!(kept.len() < pts.len());
    }

    #[test]
    fn survivors_keep_input_order() {
        let mut pts = grid_10x10();
        pts.insert(50, Point3::new(500.0, 0.0, 0.0));
        let (kept, removed) = remove_outliers(&cloud_of(pts.clone()), 6, 2.0).unwrap();
        assert!(removed.contains(&50));
        let expect: Vec<Point3> = pts
            .iter()
            .enumerate()
            .filter(|(i, _)| !removed.contains(i))
            .map(|(_, p)| *p)
            .collect();
        assert_eq!(kept.points, expect);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let pts: Vec<Point3> = (0..5).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        assert!(remove_outliers(&cloud_of(pts), 5, 1.0).is_err());
    }

    #[test]
    fn zero_k_is_a_config_error() {
        let pts = grid_10x10();
        assert!(matches!(
            remove_outliers(&cloud_of(pts), 0, 1.0),
            Err(Error::Config(_))
        ));
    }
}
