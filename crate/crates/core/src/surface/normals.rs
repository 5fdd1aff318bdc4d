//! Normal estimation with globally consistent orientation.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::spatial::{KdTree3, UnionFind};

use super::OrientedCloud;

/// Estimates one unit normal per point as the smallest-eigenvalue direction
/// of the covariance of its k-nearest neighbourhood (the point counts as its
/// own nearest neighbour), then makes signs globally consistent: a minimum
/// spanning tree over the k-NN graph, weighted by normal disagreement, is
/// traversed from each component's lowest-index root with children flipped to
/// agree with their parent; root normals point toward +z.
pub fn estimate_normals(c: &PointCloud, k: usize) -> Result<OrientedCloud> {
    let n = c.points.len();
    if k < 3 {
        return Err(Error::Config(format!(
            "normal estimation needs k >= 3, got {k}"
        )));
    }
    if n <= k {
        return Err(Error::Data(format!(
            "cloud has {n} points, not enough for k = {k} neighbourhoods"
        )));
    }
    let positions: Vec<[f64; 3]> = c.points.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree = KdTree3::build(&positions);

    let neighbourhoods: Vec<Vec<usize>> = positions
        .par_iter()
        .map(|&p| tree.knn(p, k).into_iter().map(|(i, _)| i).collect())
        .collect();

    let mut normals: Vec<Vector3<f64>> = neighbourhoods
        .par_iter()
        .map(|ids| {
            let mut mean = Vector3::zeros();
            for &i in ids {
                mean += Vector3::from(positions[i]);
            }
            mean /= ids.len() as f64;
            let mut cov = Matrix3::zeros();
            for &i in ids {
                let d = Vector3::from(positions[i]) - mean;
                cov += d * d.transpose();
            }
            smallest_eigenvector(&cov)
        })
        .collect();

    // Candidate edges from the k-NN graph, deduplicated, weighted by normal
    // disagreement so the spanning tree follows smooth surface paths.
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for (i, ids) in neighbourhoods.iter().enumerate() {
        for &j in ids {
            if j > i {
                let w = 1.0 - normals[i].dot(&normals[j]).abs();
                edges.push((w, i, j));
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));

    let mut uf = UnionFind::new(n);
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(_, i, j) in &edges {
        if uf.find(i) != uf.find(j) {
            uf.union(i, j);
            adj[i].push(j);
            adj[j].push(i);
        }
    }

    // Orientation sweep: lowest-index point of each component is its root.
    let mut visited = vec![false; n];
    for root in 0..n {
        if visited[root] {
            continue;
        }
        if normals[root].z < 0.0 || (normals[root].z == 0.0 && normals[root].x < 0.0) {
            normals[root] = -normals[root];
        }
        visited[root] = true;
        let mut queue = std::collections::VecDeque::from([root]);
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if visited[j] {
                    continue;
                }
                if normals[i].dot(&normals[j]) < 0.0 {
                    normals[j] = -normals[j];
                }
                visited[j] = true;
                queue.push_back(j);
            }
        }
    }

    Ok(OrientedCloud {
        points: c.clone(),
        normals: normals.into_iter().map(|v| [v.x, v.y, v.z]).collect(),
    })
}

/// Unit eigenvector of the smallest eigenvalue of a symmetric 3x3 matrix,
/// with a canonical sign (largest-magnitude component positive) so results
/// do not depend on the eigensolver's internal choices.
fn smallest_eigenvector(m: &Matrix3<f64>) -> Vector3<f64> {
    let eig = nalgebra::SymmetricEigen::new(*m);
    let mut best = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] < eig.eigenvalues[best] {
            best = i;
        }
    }
    let mut v: Vector3<f64> = eig.eigenvectors.column(best).into();
    let norm = v.norm();
    if norm > 0.0 {
        v /= norm;
    } else {
        v = Vector3::z();
    }
    let mut lead = 0;
    for i in 1..3 {
        if v[i].abs() > v[lead].abs() {
            lead = i;
        }
    }
    if v[lead] < 0.0 {
        -v
    } else {
        v
    }
}
