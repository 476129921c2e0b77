//! Exact K-nearest-neighbor and radius queries over 3D points.
//!
//! Queries are exact (no approximation) and fully deterministic: neighbors
//! are ordered by Euclidean distance with ties broken toward the lower point
//! index, and the same inputs always produce the same graph regardless of
//! how queries are scheduled.

use alloc::collections::BinaryHeap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};

pub const DEFAULT_LEAF_SIZE: usize = 32;

#[derive(Debug, Clone)]
enum Node {
    Split {
        dim: u8,
        value: f64,
        /// Index of the right child node; the left child is always the next
        /// node in the arena.
        right: u32,
    },
    Leaf {
        start: u32,
        len: u32,
    },
}

/// KD-tree over an immutable set of 3D points.
///
/// The split dimension at every internal node is the one with the largest
/// extent; points are divided at the median so the tree is balanced even for
/// degenerate inputs.
#[derive(Debug, Clone)]
pub struct KdTree {
    nodes: Vec<Node>,
    /// Points grouped by leaf, in arena order.
    points: Vec<[f64; 3]>,
    /// Original index of each entry in `points`.
    indices: Vec<u32>,
    len: usize,
}

/// Per-point K-nearest-neighbor table.
///
/// Row `i` holds the neighbors of query `i`, sorted ascending by distance
/// with ties broken by lower index. Distances are Euclidean, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    pub k: usize,
    /// Row-major `n x k` neighbor indices.
    pub indices: Vec<u32>,
    /// Row-major `n x k` distances.
    pub distances: Vec<f64>,
}

impl NeighborGraph {
    pub fn rows(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn row_distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Candidate ordered worst-first: greater distance, then greater index.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    d2: f64,
    idx: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        // d2 is never NaN: build rejects non-finite coordinates.
        self.d2
            .partial_cmp(&other.d2)
            .unwrap()
            .then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    /// Build an index over all points. Errors on empty or non-finite input.
    pub fn build(positions: &[[f64; 3]]) -> Result<Self> {
        Self::build_with_leaf_size(positions, DEFAULT_LEAF_SIZE)
    }

    pub fn build_with_leaf_size(positions: &[[f64; 3]], leaf_size: usize) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyInput("kd-tree build"));
        }
        if leaf_size == 0 {
            return Err(Error::InvalidParam {
                name: "leaf_size",
                reason: "must be at least 1".into(),
            });
        }
        for (i, p) in positions.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFiniteCoordinate { index: i });
            }
        }
        let mut order: Vec<u32> = (0..positions.len() as u32).collect();
        let mut tree = KdTree {
            nodes: Vec::new(),
            points: Vec::with_capacity(positions.len()),
            indices: Vec::with_capacity(positions.len()),
            len: positions.len(),
        };
        tree.build_rec(positions, &mut order, leaf_size);
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn build_rec(&mut self, positions: &[[f64; 3]], order: &mut [u32], leaf_size: usize) -> u32 {
        let pos = self.nodes.len() as u32;
        if order.len() <= leaf_size {
            let start = self.indices.len() as u32;
            for &i in order.iter() {
                self.indices.push(i);
                self.points.push(positions[i as usize]);
            }
            self.nodes.push(Node::Leaf {
                start,
                len: order.len() as u32,
            });
            return pos;
        }

        // Split dimension: largest extent of the bounding box.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in order.iter() {
            let p = &positions[i as usize];
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let mut dim = 0;
        for d in 1..3 {
            if hi[d] - lo[d] > hi[dim] - lo[dim] {
                dim = d;
            }
        }

        // Median split keeps the tree balanced even with duplicates.
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            positions[a as usize][dim]
                .partial_cmp(&positions[b as usize][dim])
                .unwrap()
                .then(a.cmp(&b))
        });
        let split_value = positions[order[mid] as usize][dim];

        self.nodes.push(Node::Split {
            dim: dim as u8,
            value: split_value,
            right: 0,
        });
        let (left, right) = order.split_at_mut(mid);
        let left_id = self.build_rec(positions, left, leaf_size);
        debug_assert_eq!(left_id, pos + 1);
        let right_id = self.build_rec(positions, right, leaf_size);
        match &mut self.nodes[pos as usize] {
            Node::Split { right, .. } => *right = right_id,
            Node::Leaf { .. } => unreachable!(),
        }
        pos
    }

    fn knn_one(&self, query: &[f64; 3], k: usize, exclude: Option<u32>, heap: &mut BinaryHeap<Cand>) {
        heap.clear();
        self.knn_rec(0, query, k, exclude, heap);
    }

    fn knn_rec(
        &self,
        node: u32,
        query: &[f64; 3],
        k: usize,
        exclude: Option<u32>,
        heap: &mut BinaryHeap<Cand>,
    ) {
        match &self.nodes[node as usize] {
            Node::Leaf { start, len } => {
                let start = *start as usize;
                let end = start + *len as usize;
                for slot in start..end {
                    let idx = self.indices[slot];
                    if exclude == Some(idx) {
                        continue;
                    }
                    let cand = Cand {
                        d2: dist2(query, &self.points[slot]),
                        idx,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if let Some(worst) = heap.peek() {
                        if cand < *worst {
                            heap.pop();
                            heap.push(cand);
                        }
                    }
                }
            }
            Node::Split { dim, value, right } => {
                let delta = query[*dim as usize] - value;
                let (near, far) = if delta < 0.0 {
                    (node + 1, *right)
                } else {
                    (*right, node + 1)
                };
                self.knn_rec(near, query, k, exclude, heap);
                // The far side may still hold a closer point, or an equal
                // distance with a lower index, so only prune on a strictly
                // greater plane distance.
                let visit_far = match heap.peek() {
                    _ if heap.len() < k => true,
                    Some(worst) => delta * delta <= worst.d2,
                    None => true,
                };
                if visit_far {
                    self.knn_rec(far, query, k, exclude, heap);
                }
            }
        }
    }

    /// Exact k nearest neighbors for arbitrary query positions. Every tree
    /// point is a candidate for every query.
    pub fn knn_points(&self, queries: &[[f64; 3]], k: usize) -> Result<NeighborGraph> {
        self.knn_impl(queries, k, |_| None)
    }

    /// Exact k nearest neighbors of each indexed point, querying the tree's
    /// own point set. With `include_self` the point itself is a candidate
    /// (at distance zero); otherwise it is excluded.
    pub fn knn_graph(&self, k: usize, include_self: bool) -> Result<NeighborGraph> {
        let available = if include_self { self.len } else { self.len - 1 };
        if k > available {
            return Err(Error::KTooLarge {
                requested: k,
                available,
            });
        }
        // Queries in original index order.
        let mut queries = vec![[0.0f64; 3]; self.len];
        for (slot, &idx) in self.indices.iter().enumerate() {
            queries[idx as usize] = self.points[slot];
        }
        self.knn_impl(&queries, k, |i| if include_self { None } else { Some(i as u32) })
    }

    fn knn_impl<F: Fn(usize) -> Option<u32>>(
        &self,
        queries: &[[f64; 3]],
        k: usize,
        exclude: F,
    ) -> Result<NeighborGraph> {
        if k == 0 {
            return Err(Error::InvalidParam {
                name: "k",
                reason: "must be at least 1".into(),
            });
        }
        if k > self.len {
            return Err(Error::KTooLarge {
                requested: k,
                available: self.len,
            });
        }
        let n = queries.len();
        let mut indices = vec![0u32; n * k];
        let mut distances = vec![0f64; n * k];
        let mut heap = BinaryHeap::with_capacity(k + 1);
        let mut row: Vec<Cand> = Vec::with_capacity(k);
        for (qi, q) in queries.iter().enumerate() {
            self.knn_one(q, k, exclude(qi), &mut heap);
            if heap.len() < k {
                return Err(Error::KTooLarge {
                    requested: k,
                    available: heap.len(),
                });
            }
            row.clear();
            row.extend(heap.iter().copied());
            row.sort_unstable();
            for (j, cand) in row.iter().enumerate() {
                indices[qi * k + j] = cand.idx;
                distances[qi * k + j] = libm::sqrt(cand.d2);
            }
        }
        Ok(NeighborGraph {
            k,
            indices,
            distances,
        })
    }

    /// All points within distance `r` (inclusive) of each query, sorted by
    /// distance with ties broken by lower index.
    pub fn radius_neighbors(&self, queries: &[[f64; 3]], r: f64) -> Result<Vec<Vec<u32>>> {
        self.radius_impl(queries, r, |_| None)
    }

    /// Radius query of the tree's own points against themselves.
    pub fn radius_graph(&self, r: f64, include_self: bool) -> Result<Vec<Vec<u32>>> {
        let mut queries = vec![[0.0f64; 3]; self.len];
        for (slot, &idx) in self.indices.iter().enumerate() {
            queries[idx as usize] = self.points[slot];
        }
        self.radius_impl(&queries, r, |i| {
            if include_self {
                None
            } else {
                Some(i as u32)
            }
        })
    }

    fn radius_impl<F: Fn(usize) -> Option<u32>>(
        &self,
        queries: &[[f64; 3]],
        r: f64,
        exclude: F,
    ) -> Result<Vec<Vec<u32>>> {
        if !(r > 0.0) {
            return Err(Error::InvalidParam {
                name: "r",
                reason: "radius must be positive".into(),
            });
        }
        let r2 = r * r;
        let mut out = Vec::with_capacity(queries.len());
        let mut found: Vec<Cand> = Vec::new();
        for (qi, q) in queries.iter().enumerate() {
            found.clear();
            self.radius_rec(0, q, r2, exclude(qi), &mut found);
            found.sort_unstable();
            out.push(found.iter().map(|c| c.idx).collect());
        }
        Ok(out)
    }

    fn radius_rec(
        &self,
        node: u32,
        query: &[f64; 3],
        r2: f64,
        exclude: Option<u32>,
        found: &mut Vec<Cand>,
    ) {
        match &self.nodes[node as usize] {
            Node::Leaf { start, len } => {
                let start = *start as usize;
                for slot in start..start + *len as usize {
                    let idx = self.indices[slot];
                    if exclude == Some(idx) {
                        continue;
                    }
                    let d2 = dist2(query, &self.points[slot]);
                    if d2 <= r2 {
                        found.push(Cand { d2, idx });
                    }
                }
            }
            Node::Split { dim, value, right } => {
                let delta = query[*dim as usize] - value;
                let (near, far) = if delta < 0.0 {
                    (node + 1, *right)
                } else {
                    (*right, node + 1)
                };
                self.radius_rec(near, query, r2, exclude, found);
                // Inclusive boundary: points exactly at distance r count.
                if delta * delta <= r2 {
                    self.radius_rec(far, query, r2, exclude, found);
                }
            }
        }
    }

    /// Index of the nearest point to `query` (tie broken by lower index).
    pub fn nearest_one(&self, query: &[f64; 3]) -> u32 {
        let mut heap = BinaryHeap::with_capacity(2);
        self.knn_one(query, 1, None, &mut heap);
        heap.pop().expect("tree is non-empty").idx
    }
}

/// Convenience wrapper matching the pipeline's usual call shape.
pub fn build_index(positions: &[[f64; 3]]) -> Result<KdTree> {
    KdTree::build(positions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// O(N^2) reference: exact distances, (distance, index) ordering.
    fn brute_knn(
        points: &[[f64; 3]],
        queries: &[[f64; 3]],
        k: usize,
        exclude_same_index: bool,
    ) -> (Vec<u32>, Vec<f64>) {
        let mut indices = Vec::new();
        let mut dists = Vec::new();
        for (qi, q) in queries.iter().enumerate() {
            let mut cands: Vec<(f64, u32)> = points
                .iter()
                .enumerate()
                .filter(|(i, _)| !(exclude_same_index && *i == qi))
                .map(|(i, p)| (dist2(q, p), i as u32))
                .collect();
            cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            for &(d2, i) in cands.iter().take(k) {
                indices.push(i);
                dists.push(libm::sqrt(d2));
            }
        }
        (indices, dists)
    }

    fn brute_radius(
        points: &[[f64; 3]],
        queries: &[[f64; 3]],
        r: f64,
        exclude_same_index: bool,
    ) -> Vec<Vec<u32>> {
        queries
            .iter()
            .enumerate()
            .map(|(qi, q)| {
                let mut cands: Vec<(f64, u32)> = points
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !(exclude_same_index && *i == qi))
                    .map(|(i, p)| (dist2(q, p), i as u32))
                    .filter(|(d2, _)| *d2 <= r * r)
                    .collect();
                cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                cands.into_iter().map(|(_, i)| i).collect()
            })
            .collect()
    }

    fn random_cloud(rng: &mut Rng, n: usize, extent: f64) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.range_f64(0.0, extent),
                    rng.range_f64(0.0, extent),
                    rng.range_f64(0.0, extent),
                ]
            })
            .collect()
    }

    #[test]
    fn single_point_is_its_own_neighbor() {
        let tree = KdTree::build(&[[1.0, 2.0, 3.0]]).unwrap();
        let g = tree.knn_graph(1, true).unwrap();
        assert_eq!(g.indices, vec![0]);
        assert_eq!(g.distances, vec![0.0]);
    }

    #[test]
    fn build_rejects_empty_and_non_finite() {
        assert!(matches!(KdTree::build(&[]), Err(Error::EmptyInput(_))));
        assert!(matches!(
            KdTree::build(&[[0.0, f64::INFINITY, 0.0]]),
            Err(Error::NonFiniteCoordinate { index: 0 })
        ));
    }

    #[test]
    fn collinear_points_query() {
        let pts = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
        ];
        let tree = KdTree::build(&pts).unwrap();
        let g = tree.knn_graph(2, false).unwrap();
        assert_eq!(g.row(0), &[1, 2]);
    }

    #[test]
    fn duplicate_points_tie_break_to_lower_index() {
        let pts = [
            [5.0, 5.0, 5.0],
            [1.0, 1.0, 1.0],
            [1.0, 1.0, 1.0],
            [1.0, 1.0, 1.0],
        ];
        let tree = KdTree::build(&pts).unwrap();
        let g = tree.knn_points(&[[1.0, 1.0, 1.0]], 3).unwrap();
        assert_eq!(g.row(0), &[1, 2, 3]);
        let g = tree.knn_graph(2, false).unwrap();
        // Point 3's two nearest are the equal-distance duplicates 1 and 2.
        assert_eq!(g.row(3), &[1, 2]);
    }

    #[test]
    fn k_equals_n_with_self_is_a_permutation() {
        let mut rng = Rng::new(404);
        let pts = random_cloud(&mut rng, 37, 10.0);
        let tree = KdTree::build(&pts).unwrap();
        let g = tree.knn_graph(37, true).unwrap();
        for i in 0..37 {
            let mut row: Vec<u32> = g.row(i).to_vec();
            row.sort_unstable();
            assert_eq!(row, (0..37).collect::<Vec<u32>>());
        }
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = Rng::new(1234);
        for _ in 0..5 {
            let pts = random_cloud(&mut rng, 1000, 50.0);
            let tree = KdTree::build(&pts).unwrap();
            for include_self in [true, false] {
                let g = tree.knn_graph(16, include_self).unwrap();
                let (bi, bd) = brute_knn(&pts, &pts, 16, !include_self);
                assert_eq!(g.indices, bi);
                assert_eq!(g.distances, bd);
            }
        }
    }

    #[test]
    fn knn_arbitrary_queries_match_brute_force() {
        let mut rng = Rng::new(88);
        let pts = random_cloud(&mut rng, 500, 20.0);
        let queries = random_cloud(&mut rng, 100, 20.0);
        let tree = KdTree::build(&pts).unwrap();
        let g = tree.knn_points(&queries, 5).unwrap();
        let (bi, bd) = brute_knn(&pts, &queries, 5, false);
        assert_eq!(g.indices, bi);
        assert_eq!(g.distances, bd);
    }

    #[test]
    fn radius_inclusive_boundary() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let tree = KdTree::build(&pts).unwrap();
        let lists = tree.radius_graph(1.0, false).unwrap();
        assert_eq!(lists, vec![vec![1], vec![0]]);
    }

    #[test]
    fn radius_smaller_than_min_gap_is_empty() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let tree = KdTree::build(&pts).unwrap();
        let lists = tree.radius_graph(0.5, false).unwrap();
        assert!(lists.iter().all(|l| l.is_empty()));
    }

    #[test]
    fn radius_matches_brute_force() {
        let mut rng = Rng::new(2024);
        for _ in 0..5 {
            let pts = random_cloud(&mut rng, 500, 5.0);
            let tree = KdTree::build(&pts).unwrap();
            for include_self in [true, false] {
                let lists = tree.radius_graph(0.8, include_self).unwrap();
                let brute = brute_radius(&pts, &pts, 0.8, !include_self);
                assert_eq!(lists, brute);
            }
        }
    }

    #[test]
    fn radius_rejects_non_positive() {
        let tree = KdTree::build(&[[0.0; 3]]).unwrap();
        assert!(tree.radius_neighbors(&[[0.0; 3]], 0.0).is_err());
        assert!(tree.radius_neighbors(&[[0.0; 3]], -1.0).is_err());
    }

    #[test]
    fn k_too_large_is_an_error() {
        let tree = KdTree::build(&[[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            tree.knn_graph(3, true),
            Err(Error::KTooLarge { .. })
        ));
        assert!(matches!(
            tree.knn_graph(2, false),
            Err(Error::KTooLarge { .. })
        ));
    }

    #[test]
    fn distance_is_symmetric() {
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let a = [rng.range_f64(-5.0, 5.0), rng.range_f64(-5.0, 5.0), rng.range_f64(-5.0, 5.0)];
            let b = [rng.range_f64(-5.0, 5.0), rng.range_f64(-5.0, 5.0), rng.range_f64(-5.0, 5.0)];
            assert_eq!(dist2(&a, &b), dist2(&b, &a));
        }
    }

    #[test]
    fn deterministic_across_builds() {
        let mut rng = Rng::new(55);
        let pts = random_cloud(&mut rng, 300, 10.0);
        let a = KdTree::build(&pts).unwrap().knn_graph(8, true).unwrap();
        let b = KdTree::build(&pts).unwrap().knn_graph(8, true).unwrap();
        assert_eq!(a, b);
    }
}
