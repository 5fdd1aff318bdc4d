//! Target-based registration: filter targets by pairwise-distance agreement,
//! match them between scan pairs through a translation consensus, estimate
//! pairwise rigid transforms, and refine all scan poses jointly.
//!
//! The global frame is the reference scan's local frame: the first scan's
//! pose is held at identity throughout refinement (the gauge freedom of the
//! pose graph), and every other pose maps that scan's local coordinates into
//! the reference frame. Coarse poses from the scanner trajectory are used
//! only to seed the translation consensus in `match_targets`; initial poses
//! for refinement come from chaining pairwise estimates along a maximum
//! spanning tree weighted by match count.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::detect::Target;
use crate::error::{Error, Result};
use crate::geom::{RigidTransform, ScanId, ScanPose};
use crate::spatial::UnionFind;

/// Registration tunables; see `PipelineConfig` for semantics and defaults.
#[derive(Debug, Clone)]
pub struct RegisterParams {
    pub tau_mm: f64,
    pub min_support: usize,
    pub epsilon_mm: f64,
    pub max_shift_mm: f64,
    pub max_iters: usize,
}

impl RegisterParams {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        Self {
            tau_mm: cfg.filter_tau_mm,
            min_support: cfg.min_support,
            epsilon_mm: cfg.match_epsilon_mm,
            max_shift_mm: cfg.max_shift_mm,
            max_iters: cfg.max_iters,
        }
    }
}

impl Default for RegisterParams {
    fn default() -> Self {
        Self::from_config(&PipelineConfig::default())
    }
}

/// The targets of one scan together with its coarse trajectory pose.
#[derive(Debug, Clone)]
pub struct ScanTargets {
    pub scan_id: ScanId,
    pub targets: Vec<Target>,
    pub coarse: RigidTransform,
}

/// One matched target pair between two scans. Indices refer to the scans'
/// original target lists. `residual_mm` starts as the deviation from the
/// translation consensus and is overwritten with the post-alignment distance
/// once a transform has been estimated or refined.
#[derive(Debug, Clone, Serialize)]
pub struct TargetMatch {
    pub scan_a: ScanId,
    pub scan_b: ScanId,
    pub target_a: usize,
    pub target_b: usize,
    pub residual_mm: f64,
}

/// One overlap-graph edge: a scan pair with at least 3 one-to-one matches.
#[derive(Debug, Clone)]
pub struct OverlapEdge {
    /// Indices into the scan list passed to `register`.
    pub scan_a: usize,
    pub scan_b: usize,
    pub matches: Vec<TargetMatch>,
    /// Pairwise estimate mapping scan_b local coordinates onto scan_a's.
    pub transform: RigidTransform,
    pub rmse_pairwise: f64,
}

#[derive(Debug, Clone)]
pub struct OverlapGraph {
    pub scan_ids: Vec<ScanId>,
    pub edges: Vec<OverlapEdge>,
}

/// Per-edge summary embedded in the registration report.
#[derive(Debug, Clone, Serialize)]
pub struct EdgeReport {
    pub scan_a: ScanId,
    pub scan_b: ScanId,
    pub match_count: usize,
    pub rmse_pairwise_mm: f64,
    pub rmse_refined_mm: f64,
    pub matches: Vec<TargetMatch>,
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub reference: ScanId,
    /// Refined poses, reference first, in input scan order.
    pub poses: Vec<ScanPose>,
    pub edges: Vec<EdgeReport>,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
}

/// Keeps the targets whose intra-scan pairwise distances agree with the
/// other scan's distance set. A distance matches if the other scan has some
/// pairwise distance within `tau`; a target is retained iff it participates
/// in at least `min_support` matched distances. Returns retained indices
/// into the original lists. Fewer than 3 retained on either side means the
/// pair has no usable overlap and contributes no edge.
pub fn filter_targets(
    a: &[Target],
    b: &[Target],
    tau: f64,
    min_support: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let keep_a = retained_by_distance(a, b, tau, min_support)?;
    let keep_b = retained_by_distance(b, a, tau, min_support)?;
    Ok((keep_a, keep_b))
}

fn retained_by_distance(
    subject: &[Target],
    other: &[Target],
    tau: f64,
    min_support: usize,
) -> Result<Vec<usize>> {
    if subject.len() < 2 || other.len() < 2 {
        return Ok(Vec::new());
    }
    let centers = |ts: &[Target]| -> Result<Vec<Vector3<f64>>> {
        ts.iter()
            .map(|t| t.center().map(Vector3::from))
            .collect()
    };
    let ps = centers(subject)?;
    let qs = centers(other)?;
    let mut other_dists: Vec<f64> = Vec::with_capacity(qs.len() * (qs.len() - 1) / 2);
    for i in 0..qs.len() {
        for j in i + 1..qs.len() {
            other_dists.push((qs[i] - qs[j]).norm());
        }
    }
    other_dists.sort_by(f64::total_cmp);
    let has_match = |d: f64| {
        let lo = other_dists.partition_point(|&x| x < d - tau);
        lo < other_dists.len() && other_dists[lo] <= d + tau
    };
    let mut support = vec![0usize; ps.len()];
    for i in 0..ps.len() {
        for j in i + 1..ps.len() {
            if has_match((ps[i] - ps[j]).norm()) {
                support[i] += 1;
                support[j] += 1;
            }
        }
    }
    Ok((0..ps.len()).filter(|&i| support[i] >= min_support).collect())
}

/// Matches retained targets between two scans under the assumption that the
/// coarse alignment leaves only a small common translation: the displacement
/// vector of every candidate pair is computed with scan b's centres mapped
/// through `coarse` (scan-b local to scan-a local), the vectors are clustered
/// by single linkage at tolerance `epsilon`, and the largest cluster whose
/// mean stays within `max_shift` is the consensus. Its members are made
/// one-to-one greedily by ascending deviation from the consensus. Fewer than
/// 3 surviving matches means no edge (empty result); a tie between equal-size
/// qualifying clusters is an error asking for a smaller epsilon.
///
/// The `max_shift` bound is what makes the pure-translation assumption safe:
/// targets laid out in regular rows produce self-consistent displacement
/// clusters at whole row offsets (tens of millimetres), and only the premise
/// that coarse alignment is already close separates those from the real one.
pub fn match_targets(
    a: &[Target],
    b: &[Target],
    keep_a: &[usize],
    keep_b: &[usize],
    coarse: &RigidTransform,
    epsilon: f64,
    max_shift: f64,
) -> Result<Vec<TargetMatch>> {
    if keep_a.len() < 3 || keep_b.len() < 3 {
        return Ok(Vec::new());
    }
    if epsilon <= 0.0 {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    if max_shift < epsilon {
        return Err(Error::Config(format!(
            "max_shift ({max_shift}) must not be below epsilon ({epsilon})"
        )));
    }
    let pa: Vec<Vector3<f64>> = keep_a
        .iter()
        .map(|&i| a[i].center().map(Vector3::from))
        .collect::<Result<_>>()?;
    let pb: Vec<Vector3<f64>> = keep_b
        .iter()
        .map(|&j| b[j].center().map(|c| coarse.apply(Vector3::from(c))))
        .collect::<Result<_>>()?;

    // Displacement vector of every candidate pair, tagged with original
    // target indices.
    let mut vecs = Vec::with_capacity(pa.len() * pb.len());
    for (ka, va) in pa.iter().enumerate() {
        for (kb, vb) in pb.iter().enumerate() {
            vecs.push((keep_a[ka], keep_b[kb], vb - va));
        }
    }

    // Single-linkage clustering over a grid hash of cell size epsilon: two
    // vectors join a cluster if their difference has norm <= epsilon, which
    // only ever links vectors in the same or adjacent cells.
    let cell = |v: &Vector3<f64>| {
        (
            (v.x / epsilon).floor() as i64,
            (v.y / epsilon).floor() as i64,
            (v.z / epsilon).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (idx, (_, _, v)) in vecs.iter().enumerate() {
        grid.entry(cell(v)).or_default().push(idx);
    }
    let mut uf = UnionFind::new(vecs.len());
    for (idx, (_, _, v)) in vecs.iter().enumerate() {
        let (cx, cy, cz) = cell(v);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &other in bucket {
                        if other > idx && (v - vecs[other].2).norm() <= epsilon {
                            uf.union(idx, other);
                        }
                    }
                }
            }
        }
    }
    let mut clusters: HashMap<usize, Vec<usize>> = HashMap::new();
    for idx in 0..vecs.len() {
        clusters.entry(uf.find(idx)).or_default().push(idx);
    }
    // Fixed summation order keeps each mean identical when the scan
    // arguments are swapped (every displacement just flips sign).
    let mut qualified: Vec<(Vec<usize>, Vector3<f64>)> = Vec::new();
    for members in clusters.values() {
        if members.len() < 3 {
            continue;
        }
        let mut ms = members.clone();
        ms.sort_by_key(|&m| {
            let (i, j, _) = vecs[m];
            (i.min(j), i.max(j), i)
        });
        let mut mean = Vector3::zeros();
        for &m in &ms {
            mean += vecs[m].2;
        }
        mean /= ms.len() as f64;
        if mean.norm() <= max_shift {
            qualified.push((ms, mean));
        }
    }
    let best_size = qualified.iter().map(|(ms, _)| ms.len()).max().unwrap_or(0);
    if best_size < 3 {
        return Ok(Vec::new());
    }
    let mut biggest: Vec<(Vec<usize>, Vector3<f64>)> = qualified
        .into_iter()
        .filter(|(ms, _)| ms.len() == best_size)
        .collect();
    if biggest.len() > 1 {
        return Err(Error::AmbiguousConsensus {
            scan_a: a[keep_a[0]].scan_id.to_string(),
            scan_b: b[keep_b[0]].scan_id.to_string(),
            count: biggest.len(),
            size: best_size,
        });
    }
    let (members, consensus) = biggest.pop().expect("one qualifying cluster");

    let mut ranked: Vec<(f64, usize, usize, usize)> = members
        .iter()
        .map(|&m| {
            let (i, j, v) = vecs[m];
            ((v - consensus).norm(), i.min(j), i.max(j), m)
        })
        .collect();
    ranked.sort_by(|x, y| {
        x.0.total_cmp(&y.0)
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    });
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut matches = Vec::new();
    for (dev, _, _, m) in ranked {
        let (i, j, _) = vecs[m];
        if used_a[i] || used_b[j] {
            continue;
        }
        used_a[i] = true;
        used_b[j] = true;
        matches.push(TargetMatch {
            scan_a: a[i].scan_id.clone(),
            scan_b: b[j].scan_id.clone(),
            target_a: i,
            target_b: j,
            residual_mm: dev,
        });
    }
    if matches.len() < 3 {
        return Ok(Vec::new());
    }
    Ok(matches)
}

/// Least-squares rigid transform taking the second point of every pair onto
/// the first: minimizes the summed squared distance between `first_i` and
/// `T(second_i)` via the centred cross-covariance and its singular value
/// decomposition, with the reflection case corrected so det(R) = +1.
pub fn estimate_rigid(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> Result<RigidTransform> {
    if pairs.len() < 3 {
        return Err(Error::Degenerate(format!(
            "only {} target pair(s); a rigid transform needs at least 3",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let mut cq = Vector3::zeros();
    let mut cp = Vector3::zeros();
    for (q, p) in pairs {
        cq += q;
        cp += p;
    }
    cq /= n;
    cp /= n;
    let mut h = Matrix3::zeros();
    for (q, p) in pairs {
        h += (p - cp) * (q - cq).transpose();
    }
    let svd = nalgebra::SVD::new(h, true, true);
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let s = svd.singular_values;
    if s[1] <= 1e-12 * s[0].max(f64::MIN_POSITIVE) {
        return Err(Error::Degenerate(
            "target pairs are collinear; the rotation about their axis is unobservable".into(),
        ));
    }
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let mut corr = Matrix3::identity();
    if d < 0.0 {
        corr[(2, 2)] = -1.0;
    }
    let r = v * corr * u.transpose();
    let t = cq - r * cp;
    RigidTransform::new(r, t)
}

/// Joint pose refinement problem: minimize the summed squared distance
/// between the two sightings of every matched target, over all scan poses,
/// with the reference scan's pose fixed (the gauge). Each pose carries a
/// 6-vector local step `(rotation vector, translation)`: rotation applied on
/// the left of the current rotation, translation added.
#[derive(Debug, Clone)]
pub struct PoseGraphProblem {
    pub scan_count: usize,
    pub reference: usize,
    pub edges: Vec<PoseGraphEdge>,
}

/// One edge's observations: the matched target centres in each scan's local
/// frame.
#[derive(Debug, Clone)]
pub struct PoseGraphEdge {
    pub scan_a: usize,
    pub scan_b: usize,
    pub pairs: Vec<(Vector3<f64>, Vector3<f64>)>,
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub poses: Vec<RigidTransform>,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost before the first step and after every accepted step.
    pub cost_trace: Vec<f64>,
}

impl PoseGraphProblem {
    pub fn residual_count(&self) -> usize {
        3 * self.edges.iter().map(|e| e.pairs.len()).sum::<usize>()
    }

    pub fn param_count(&self) -> usize {
        6 * (self.scan_count - 1)
    }

    /// Parameter column of a scan's 6-block; the reference scan has none.
    fn col(&self, scan: usize) -> Option<usize> {
        if scan == self.reference {
            None
        } else if scan < self.reference {
            Some(6 * scan)
        } else {
            Some(6 * (scan - 1))
        }
    }

    /// Stacked residuals `pose_a(p_a) - pose_b(p_b)` over every match.
    pub fn residuals(&self, poses: &[RigidTransform]) -> DVector<f64> {
        let mut r = DVector::zeros(self.residual_count());
        let mut row = 0;
        for e in &self.edges {
            for (pa, pb) in &e.pairs {
                let d = poses[e.scan_a].apply(*pa) - poses[e.scan_b].apply(*pb);
                r.fixed_rows_mut::<3>(row).copy_from(&d);
                row += 3;
            }
        }
        r
    }

    pub fn cost(&self, poses: &[RigidTransform]) -> f64 {
        self.residuals(poses).norm_squared()
    }

    /// Analytic Jacobian of the residuals with respect to every scan's local
    /// step, evaluated at step zero. For a residual `R_a p_a + t_a - R_b p_b
    /// - t_b`, the block for scan a is `[-[R_a p_a]x | I]` and for scan b
    /// `[+[R_b p_b]x | -I]`; the reference scan contributes no columns.
    pub fn jacobian(&self, poses: &[RigidTransform]) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.residual_count(), self.param_count());
        let mut row = 0;
        for e in &self.edges {
            for (pa, pb) in &e.pairs {
                if let Some(c) = self.col(e.scan_a) {
                    let rp = poses[e.scan_a].rotation() * pa;
                    j.fixed_view_mut::<3, 3>(row, c).copy_from(&-skew(&rp));
                    j.fixed_view_mut::<3, 3>(row, c + 3)
                        .copy_from(&Matrix3::identity());
                }
                if let Some(c) = self.col(e.scan_b) {
                    let rp = poses[e.scan_b].rotation() * pb;
                    j.fixed_view_mut::<3, 3>(row, c).copy_from(&skew(&rp));
                    j.fixed_view_mut::<3, 3>(row, c + 3)
                        .copy_from(&(-Matrix3::identity()));
                }
                row += 3;
            }
        }
        j
    }

    /// Applies a stacked parameter step: for each non-reference scan,
    /// rotation becomes `Exp(dw) * R` and translation gains `dt`.
    pub fn apply_step(&self, poses: &[RigidTransform], delta: &DVector<f64>) -> Vec<RigidTransform> {
        let mut out = Vec::with_capacity(poses.len());
        for (scan, pose) in poses.iter().enumerate() {
            match self.col(scan) {
                None => out.push(pose.clone()),
                Some(c) => {
                    let dw = Vector3::new(delta[c], delta[c + 1], delta[c + 2]);
                    let dt = Vector3::new(delta[c + 3], delta[c + 4], delta[c + 5]);
                    let exp = RigidTransform::from_rotvec(dw, Vector3::zeros());
                    let stepped = RigidTransform::new(
                        exp.rotation() * pose.rotation(),
                        pose.translation() + dt,
                    )
                    .expect("rotation product stays orthonormal");
                    out.push(stepped);
                }
            }
        }
        out
    }

    /// Levenberg-Marquardt refinement. Stops when the relative cost decrease
    /// of an accepted step falls below 1e-12 or the gradient norm below
    /// 1e-10; accepted steps never increase the cost.
    pub fn solve(&self, init: &[RigidTransform], max_iters: usize) -> Result<RefineResult> {
        assert_eq!(init.len(), self.scan_count);
        let mut poses = init.to_vec();
        let mut residual = self.residuals(&poses);
        let mut cost = residual.norm_squared();
        let initial_cost = cost;
        let mut cost_trace = vec![cost];
        let mut lambda = 1e-6;
        let mut iterations = 0;
        let mut grad_norm = f64::INFINITY;
        let mut converged = false;
        while iterations < max_iters {
            iterations += 1;
            let j = self.jacobian(&poses);
            let grad = j.transpose() * &residual;
            grad_norm = grad.norm();
            if grad_norm < 1e-10 {
                converged = true;
                break;
            }
            let jtj = j.transpose() * &j;
            let mut accepted = false;
            for _ in 0..48 {
                let mut lhs = jtj.clone();
                for d in 0..lhs.nrows() {
                    lhs[(d, d)] += lambda * lhs[(d, d)].max(1e-12);
                }
                let Some(chol) = lhs.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let step = chol.solve(&(-&grad));
                let candidate = self.apply_step(&poses, &step);
                let cand_residual = self.residuals(&candidate);
                let cand_cost = cand_residual.norm_squared();
                if cand_cost <= cost {
                    let rel_drop = (cost - cand_cost) / cost.max(f64::MIN_POSITIVE);
                    poses = candidate;
                    residual = cand_residual;
                    cost = cand_cost;
                    cost_trace.push(cost);
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    if rel_drop < 1e-12 {
                        converged = true;
                    }
                    break;
                }
                lambda *= 10.0;
                if lambda > 1e14 {
                    break;
                }
            }
            if converged {
                break;
            }
            if !accepted {
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence {
                iters: iterations,
                grad_norm,
            });
        }
        Ok(RefineResult {
            poses,
            iterations,
            initial_cost,
            final_cost: cost,
            cost_trace,
        })
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Full registration: pairwise filtering/matching/estimation over every scan
/// pair (in parallel), connectivity check, initialization by chaining along
/// a maximum spanning tree (weighted by match count), and joint refinement.
/// The first scan is the reference; its pose is identity and defines the
/// output frame.
pub fn register(scans: &[ScanTargets], params: &RegisterParams) -> Result<Registration> {
    if scans.is_empty() {
        return Err(Error::Data("no scans to register".into()));
    }
    let reference = 0usize;
    if scans.len() == 1 {
        return Ok(Registration {
            reference: scans[0].scan_id.clone(),
            poses: vec![ScanPose {
                scan_id: scans[0].scan_id.clone(),
                pose: RigidTransform::identity(),
            }],
            edges: Vec::new(),
            iterations: 0,
            initial_cost: 0.0,
            final_cost: 0.0,
        });
    }

    let pairs: Vec<(usize, usize)> = (0..scans.len())
        .flat_map(|i| (i + 1..scans.len()).map(move |j| (i, j)))
        .collect();
    let candidate_edges: Vec<Option<OverlapEdge>> = pairs
        .par_iter()
        .map(|&(i, j)| build_edge(scans, i, j, params))
        .collect::<Result<_>>()?;
    let edges: Vec<OverlapEdge> = candidate_edges.into_iter().flatten().collect();

    // Connectivity with respect to the reference scan.
    let mut uf = UnionFind::new(scans.len());
    for e in &edges {
        uf.union(e.scan_a, e.scan_b);
    }
    let mut components: HashMap<usize, Vec<String>> = HashMap::new();
    for (idx, s) in scans.iter().enumerate() {
        components
            .entry(uf.find(idx))
            .or_default()
            .push(s.scan_id.to_string());
    }
    if components.len() > 1 {
        let mut groups: Vec<Vec<String>> = components.into_values().collect();
        groups.sort();
        return Err(Error::Disconnected(groups));
    }

    // Maximum spanning tree by match count; ties broken by scan indices so
    // the tree is deterministic.
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by_key(|&k| {
        let e = &edges[k];
        (usize::MAX - e.matches.len(), e.scan_a, e.scan_b)
    });
    let mut tree_adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); scans.len()];
    let mut tree_uf = UnionFind::new(scans.len());
    for k in order {
        let e = &edges[k];
        if tree_uf.find(e.scan_a) != tree_uf.find(e.scan_b) {
            tree_uf.union(e.scan_a, e.scan_b);
            tree_adj[e.scan_a].push((e.scan_b, k));
            tree_adj[e.scan_b].push((e.scan_a, k));
        }
    }

    // Chain initial poses outward from the reference.
    let mut init = vec![RigidTransform::identity(); scans.len()];
    let mut seen = vec![false; scans.len()];
    seen[reference] = true;
    let mut queue = std::collections::VecDeque::from([reference]);
    while let Some(parent) = queue.pop_front() {
        for &(child, k) in &tree_adj[parent] {
            if seen[child] {
                continue;
            }
            seen[child] = true;
            let e = &edges[k];
            // edge transform maps scan_b local onto scan_a local
            init[child] = if child == e.scan_b {
                init[parent].compose(&e.transform)
            } else {
                init[parent].compose(&e.transform.inverse())
            };
            queue.push_back(child);
        }
    }

    let problem = PoseGraphProblem {
        scan_count: scans.len(),
        reference,
        edges: edges
            .iter()
            .map(|e| {
                Ok(PoseGraphEdge {
                    scan_a: e.scan_a,
                    scan_b: e.scan_b,
                    pairs: edge_pairs(scans, e)?,
                })
            })
            .collect::<Result<_>>()?,
    };
    let refined = problem.solve(&init, params.max_iters)?;

    let mut reports = Vec::with_capacity(edges.len());
    for e in edges {
        let qa = &refined.poses[e.scan_a];
        let qb = &refined.poses[e.scan_b];
        let mut matches = e.matches;
        let mut sum_sq = 0.0;
        for m in &mut matches {
            let pa = Vector3::from(scans[e.scan_a].targets[m.target_a].center()?);
            let pb = Vector3::from(scans[e.scan_b].targets[m.target_b].center()?);
            m.residual_mm = (qa.apply(pa) - qb.apply(pb)).norm();
            sum_sq += m.residual_mm * m.residual_mm;
        }
        let rmse_refined_mm = (sum_sq / matches.len() as f64).sqrt();
        reports.push(EdgeReport {
            scan_a: scans[e.scan_a].scan_id.clone(),
            scan_b: scans[e.scan_b].scan_id.clone(),
            match_count: matches.len(),
            rmse_pairwise_mm: e.rmse_pairwise,
            rmse_refined_mm,
            matches,
        });
    }

    Ok(Registration {
        reference: scans[reference].scan_id.clone(),
        poses: scans
            .iter()
            .zip(&refined.poses)
            .map(|(s, pose)| ScanPose {
                scan_id: s.scan_id.clone(),
                pose: pose.clone(),
            })
            .collect(),
        edges: reports,
        iterations: refined.iterations,
        initial_cost: refined.initial_cost,
        final_cost: refined.final_cost,
    })
}

fn edge_pairs(scans: &[ScanTargets], e: &OverlapEdge) -> Result<Vec<(Vector3<f64>, Vector3<f64>)>> {
    e.matches
        .iter()
        .map(|m| {
            Ok((
                Vector3::from(scans[e.scan_a].targets[m.target_a].center()?),
                Vector3::from(scans[e.scan_b].targets[m.target_b].center()?),
            ))
        })
        .collect()
}

/// Filter, match, and pairwise-estimate one scan pair; `None` when the pair
/// has no usable overlap. Degenerate target layouts (collinear matches) are
/// logged and treated as no overlap rather than failing the whole job.
fn build_edge(
    scans: &[ScanTargets],
    i: usize,
    j: usize,
    params: &RegisterParams,
) -> Result<Option<OverlapEdge>> {
    let a = &scans[i];
    let b = &scans[j];
    let (keep_a, keep_b) = filter_targets(&a.targets, &b.targets, params.tau_mm, params.min_support)?;
    if keep_a.len() < 3 || keep_b.len() < 3 {
        return Ok(None);
    }
    let coarse = a.coarse.inverse().compose(&b.coarse);
    let matches = match_targets(
        &a.targets,
        &b.targets,
        &keep_a,
        &keep_b,
        &coarse,
        params.epsilon_mm,
        params.max_shift_mm,
    )?;
    if matches.len() < 3 {
        return Ok(None);
    }
    let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = matches
        .iter()
        .map(|m| {
            Ok((
                Vector3::from(a.targets[m.target_a].center()?),
                Vector3::from(b.targets[m.target_b].center()?),
            ))
        })
        .collect::<Result<_>>()?;
    let transform = match estimate_rigid(&pairs) {
        Ok(t) => t,
        Err(Error::Degenerate(msg)) => {
            log::warn!(
                "dropping overlap {} - {}: {msg}",
                a.scan_id,
                b.scan_id
            );
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let mut matches = matches;
    let mut sum_sq = 0.0;
    for (m, (pa, pb)) in matches.iter_mut().zip(&pairs) {
        m.residual_mm = (pa - transform.apply(*pb)).norm();
        sum_sq += m.residual_mm * m.residual_mm;
    }
    let rmse_pairwise = (sum_sq / matches.len() as f64).sqrt();
    Ok(Some(OverlapEdge {
        scan_a: i,
        scan_b: j,
        matches,
        transform,
        rmse_pairwise,
    }))
}
