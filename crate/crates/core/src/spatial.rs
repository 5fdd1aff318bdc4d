//! In-memory spatial search structures.
//!
//! The k-NN contract is exact: results are the true k nearest by squared
//! Euclidean distance, with ties broken by ascending point index so every
//! caller sees a deterministic neighbourhood.

/// Static kd-tree over a fixed set of 3D positions.
pub struct KdTree3 {
    /// Positions permuted into tree order.
    pts: Vec<[f64; 3]>,
    /// Original index of each tree slot.
    idx: Vec<usize>,
    /// Split axis per internal slot (leaf slots keep their build axis, unused).
    axis: Vec<u8>,
}

const LEAF_SIZE: usize = 12;

impl KdTree3 {
    pub fn build(points: &[[f64; 3]]) -> Self {
        let n = points.len();
        let mut tree = KdTree3 {
            pts: points.to_vec(),
            idx: (0..n).collect(),
            axis: vec![0; n],
        };
        if n > 0 {
            tree.split(0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    fn split(&mut self, lo: usize, hi: usize) {
        if hi - lo <= LEAF_SIZE {
            return;
        }
        // Split on the axis with the largest extent; ties pick the lower axis.
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in &self.pts[lo..hi] {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let mut axis = 0;
        for a in 1..3 {
            if max[a] - min[a] > max[axis] - min[axis] {
                axis = a;
            }
        }
        let mid = lo + (hi - lo) / 2;
        let (pts, idx) = (&mut self.pts, &mut self.idx);
        // Sort keys include the original index so builds are deterministic
        // even with duplicated coordinates.
        let mut order: Vec<usize> = (lo..hi).collect();
        order.select_nth_unstable_by(mid - lo, |&i, &j| {
            pts[i][axis]
                .total_cmp(&pts[j][axis])
                .then(idx[i].cmp(&idx[j]))
        });
        let mut perm_pts = Vec::with_capacity(hi - lo);
        let mut perm_idx = Vec::with_capacity(hi - lo);
        for &i in &order {
            perm_pts.push(pts[i]);
            perm_idx.push(idx[i]);
        }
        pts[lo..hi].copy_from_slice(&perm_pts);
        idx[lo..hi].copy_from_slice(&perm_idx);
        self.axis[mid] = axis as u8;
        self.split(lo, mid);
        self.split(mid + 1, hi);
    }

    /// The `k` nearest neighbours of `query`, sorted by (distance, index).
    /// Returns fewer than `k` pairs only when the tree holds fewer points.
    /// Distances returned are Euclidean.
    pub fn knn(&self, query: [f64; 3], k: usize) -> Vec<(usize, f64)> {
        if k == 0 || self.pts.is_empty() {
            return Vec::new();
        }
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.knn_walk(0, self.pts.len(), query, k, &mut heap);
        let mut out: Vec<(usize, f64)> = heap.into_iter().map(|(d2, i)| (i, d2)).collect();
        out.sort_unstable_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        for entry in &mut out {
            entry.1 = entry.1.sqrt();
        }
        out
    }

    fn knn_walk(
        &self,
        lo: usize,
        hi: usize,
        query: [f64; 3],
        k: usize,
        heap: &mut Vec<(f64, usize)>,
    ) {
        if hi - lo <= LEAF_SIZE {
            for slot in lo..hi {
                self.offer(slot, query, k, heap);
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let axis = self.axis[mid] as usize;
        let delta = query[axis] - self.pts[mid][axis];
        self.offer(mid, query, k, heap);
        let (near, far) = if delta <= 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_walk(near.0, near.1, query, k, heap);
        if heap.len() < k || delta * delta <= heap[0].0 {
            self.knn_walk(far.0, far.1, query, k, heap);
        }
    }

    /// Max-heap insert keeping the k smallest (d2, index) pairs; the ordering
    /// on the pair is lexicographic, which is what breaks distance ties.
    fn offer(&self, slot: usize, query: [f64; 3], k: usize, heap: &mut Vec<(f64, usize)>) {
        let p = self.pts[slot];
        let d2 = dist2(p, query);
        let cand = (d2, self.idx[slot]);
        if heap.len() < k {
            heap.push(cand);
            let last = heap.len() - 1;
            heap_up(heap, last);
        } else if cand < heap[0] {
            heap[0] = cand;
            heap_down(heap, 0);
        }
    }

    /// All points within `radius` (inclusive) of `query`, sorted by index.
    pub fn within(&self, query: [f64; 3], radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if !self.pts.is_empty() && radius >= 0.0 {
            self.range_walk(0, self.pts.len(), query, radius * radius, &mut out);
        }
        out.sort_unstable_by_key(|&(i, _)| i);
        for entry in &mut out {
            entry.1 = entry.1.sqrt();
        }
        out
    }

    fn range_walk(
        &self,
        lo: usize,
        hi: usize,
        query: [f64; 3],
        r2: f64,
        out: &mut Vec<(usize, f64)>,
    ) {
        if hi - lo <= LEAF_SIZE {
            for slot in lo..hi {
                let d2 = dist2(self.pts[slot], query);
                if d2 <= r2 {
                    out.push((self.idx[slot], d2));
                }
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let axis = self.axis[mid] as usize;
        let delta = query[axis] - self.pts[mid][axis];
        let d2 = dist2(self.pts[mid], query);
        if d2 <= r2 {
            out.push((self.idx[mid], d2));
        }
        if delta <= 0.0 || delta * delta <= r2 {
            self.range_walk(lo, mid, query, r2, out);
        }
        if delta > 0.0 || delta * delta <= r2 {
            self.range_walk(mid + 1, hi, query, r2, out);
        }
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn heap_up(heap: &mut [(f64, usize)], mut i: usize) {
    while i > 0 {
        let parent = (i - 1) / 2;
        if heap[i] > heap[parent] {
            heap.swap(i, parent);
            i = parent;
        } else {
            break;
        }
    }
}

fn heap_down(heap: &mut [(f64, usize)], mut i: usize) {
    loop {
        let (l, r) = (2 * i + 1, 2 * i + 2);
        let mut largest = i;
        if l < heap.len() && heap[l] > heap[largest] {
            largest = l;
        }
        if r < heap.len() && heap[r] > heap[largest] {
            largest = r;
        }
        if largest == i {
            break;
        }
        heap.swap(i, largest);
        i = largest;
    }
}

/// Disjoint-set forest with path halving and union by rank.
pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(points: &[[f64; 3]], query: [f64; 3], k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points
            .iter()
            .enumerate()
            .map(|(i, &p)| (i, dist2(p, query)))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all.into_iter().map(|(i, d2)| (i, d2.sqrt())).collect()
    }

    #[test]
    fn knn_matches_brute_force_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1usize, 5, 13, 100, 731] {
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| {
                    [
                        rng.random_range(-50.0..50.0),
                        rng.random_range(-50.0..50.0),
                        rng.random_range(-50.0..50.0),
                    ]
                })
                .collect();
            let tree = KdTree3::build(&pts);
            for _ in 0..20 {
                let q = [
                    rng.random_range(-60.0..60.0),
                    rng.random_range(-60.0..60.0),
                    rng.random_range(-60.0..60.0),
                ];
                for k in [1usize, 4, 16] {
                    let got = tree.knn(q, k);
                    let want = brute_knn(&pts, q, k);
                    assert_eq!(got.len(), want.len());
                    for (g, w) in got.iter().zip(&want) {
                        assert_eq!(g.0, w.0);
                        assert!((g.1 - w.1).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn duplicate_points_tie_break_by_index() {
        let pts = vec![[1.0, 1.0, 1.0]; 6];
        let tree = KdTree3::build(&pts);
        let got = tree.knn([1.0, 1.0, 1.0], 3);
        assert_eq!(
            got.iter().map(|&(i, _)| i).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn within_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<[f64; 3]> = (0..400)
            .map(|_| {
                [
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                ]
            })
            .collect();
        let tree = KdTree3::build(&pts);
        for _ in 0..30 {
            let q = [
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            ];
            let r = rng.random_range(0.5..6.0);
            let got: Vec<usize> = tree.within(q, r).into_iter().map(|(i, _)| i).collect();
            let want: Vec<usize> = pts
                .iter()
                .enumerate()
                .filter(|(_, &p)| dist2(p, q) <= r * r)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn union_find_components() {
        let mut uf = UnionFind::new(5);
        uf.union(0, 1);
        uf.union(3, 4);
        assert_eq!(uf.find(0), uf.find(1));
        assert_ne!(uf.find(1), uf.find(3));
        uf.union(1, 3);
        assert_eq!(uf.find(0), uf.find(4));
        assert_ne!(uf.find(2), uf.find(0));
    }

    proptest! {
        #[test]
        fn knn_is_sorted_and_exact(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1usize..60);
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| {
                    [
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                    ]
                })
                .collect();
            let tree = KdTree3::build(&pts);
            let q = [
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ];
            let k = rng.random_range(1usize..10);
            let got = tree.knn(q, k);
            let want = brute_knn(&pts, q, k);
            prop_assert_eq!(
                got.iter().map(|&(i, _)| i).collect::<Vec<_>>(),
                want.iter().map(|&(i, _)| i).collect::<Vec<_>>()
            );
        }
    }
}
