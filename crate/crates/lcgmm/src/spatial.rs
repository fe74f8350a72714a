//! Exact nearest-neighbor queries and kNN graph construction.
//!
//! The index is a kd-tree with an exactness contract: every query returns
//! precisely the brute-force answer, with distance ties broken by the lowest
//! point index. That keeps graph construction and ICP correspondences
//! reproducible bit-for-bit across platforms and thread counts.

use alloc::vec::Vec;

use nalgebra::Vector3;
use thiserror::Error;

use crate::fmath;
use crate::geometry::PointCloud;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpatialError {
    #[error("neighbor graph needs at least 2 points, got {actual}")]
    TooFewPoints { actual: usize },
    #[error("edge ({i}, {j}) is invalid for a graph on {n} vertices")]
    BadEdge { i: u32, j: u32, n: usize },
}

/// Symmetric neighbor relation over scanned-cloud indices, stored as
/// canonical unordered pairs `(i, j)` with `i < j`, sorted lexicographically.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    n: usize,
    edges: Vec<(u32, u32)>,
}

impl NeighborGraph {
    /// Graph with no edges; useful to disable the local-consistency term.
    pub fn empty(n: usize) -> Self {
        Self { n, edges: Vec::new() }
    }

    /// Graph from explicit unordered pairs. Pairs are canonicalized and
    /// deduplicated; self-loops and out-of-range indices are rejected.
    pub fn from_edges(n: usize, pairs: &[(u32, u32)]) -> Result<Self, SpatialError> {
        let mut edges = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs {
            if i == j || i as usize >= n || j as usize >= n {
                return Err(SpatialError::BadEdge { i, j, n });
            }
            edges.push(if i < j { (i, j) } else { (j, i) });
        }
        edges.sort_unstable();
        edges.dedup();
        Ok(Self { n, edges })
    }

    pub fn vertex_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Unordered edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn degree(&self, v: usize) -> usize {
        let v = v as u32;
        self.edges.iter().filter(|&&(a, b)| a == v || b == v).count()
    }
}

struct Node {
    /// Splitting axis (0..3); leaves use 3.
    axis: u8,
    /// Split coordinate for inner nodes.
    split: f64,
    left: u32,
    right: u32,
    /// Leaf payload: range into `order`.
    start: u32,
    end: u32,
}

const LEAF_SIZE: usize = 16;
const NO_CHILD: u32 = u32::MAX;

/// kd-tree over a point cloud. Build once, query concurrently.
pub struct SpatialIndex {
    points: Vec<Vector3<f64>>,
    order: Vec<u32>,
    nodes: Vec<Node>,
    root: u32,
}

impl SpatialIndex {
    pub fn build(cloud: &PointCloud) -> Self {
        let points: Vec<Vector3<f64>> = cloud.points().to_vec();
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::new();
        let root = if points.is_empty() {
            NO_CHILD
        } else {
            let len = points.len();
            build_node(&points, &mut order, 0, len, &mut nodes)
        };
        Self {
            points,
            order,
            nodes,
            root,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Exact nearest neighbor of `query`: `(index, distance)`. Ties by
    /// squared distance resolve to the lowest index.
    ///
    /// Panics if the index is empty.
    pub fn nearest(&self, query: &Vector3<f64>) -> (usize, f64) {
        assert!(!self.is_empty(), "nearest() on an empty index");
        let mut best = (u32::MAX, f64::INFINITY);
        self.nearest_rec(self.root, query, &mut best);
        (best.0 as usize, fmath::sqrt(best.1))
    }

    fn nearest_rec(&self, node: u32, query: &Vector3<f64>, best: &mut (u32, f64)) {
        let node = &self.nodes[node as usize];
        if node.axis == 3 {
            for &idx in &self.order[node.start as usize..node.end as usize] {
                let d2 = (self.points[idx as usize] - query).norm_squared();
                if d2 < best.1 || (d2 == best.1 && idx < best.0) {
                    *best = (idx, d2);
                }
            }
            return;
        }
        let delta = query[node.axis as usize] - node.split;
        let (near, far) = if delta <= 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.nearest_rec(near, query, best);
        // Visit the far side on equality too: an equidistant lower index
        // could be hiding there.
        if delta * delta <= best.1 {
            self.nearest_rec(far, query, best);
        }
    }

    /// Exact `k` nearest neighbors of `query`, ordered by `(distance, index)`.
    /// Returns fewer than `k` entries only when the cloud is smaller than `k`.
    pub fn k_nearest(&self, query: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.len());
        if k == 0 {
            return Vec::new();
        }
        // Candidate set kept sorted by (d2, index); small k keeps this cheap.
        let mut heap: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        self.k_nearest_rec(self.root, query, k, &mut heap);
        heap.into_iter()
            .map(|(d2, idx)| (idx as usize, fmath::sqrt(d2)))
            .collect()
    }

    fn k_nearest_rec(&self, node: u32, query: &Vector3<f64>, k: usize, heap: &mut Vec<(f64, u32)>) {
        let node = &self.nodes[node as usize];
        if node.axis == 3 {
            for &idx in &self.order[node.start as usize..node.end as usize] {
                let d2 = (self.points[idx as usize] - query).norm_squared();
                let key = (d2, idx);
                if heap.len() < k || key < *heap.last().unwrap() {
                    let pos = heap.partition_point(|&e| e < key);
                    heap.insert(pos, key);
                    heap.truncate(k);
                }
            }
            return;
        }
        let delta = query[node.axis as usize] - node.split;
        let (near, far) = if delta <= 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.k_nearest_rec(near, query, k, heap);
        if heap.len() < k || delta * delta <= heap.last().unwrap().0 {
            self.k_nearest_rec(far, query, k, heap);
        }
    }
}

fn build_node(
    points: &[Vector3<f64>],
    order: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> u32 {
    let count = end - start;
    if count <= LEAF_SIZE {
        nodes.push(Node {
            axis: 3,
            split: 0.0,
            left: NO_CHILD,
            right: NO_CHILD,
            start: start as u32,
            end: end as u32,
        });
        return (nodes.len() - 1) as u32;
    }

    // Split on the widest axis at the median point.
    let slice = &mut order[start..end];
    let mut lo = points[slice[0] as usize];
    let mut hi = lo;
    for &idx in slice.iter() {
        let p = points[idx as usize];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = hi - lo;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };

    let mid = count / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .partial_cmp(&points[b as usize][axis])
            .unwrap()
            .then(a.cmp(&b))
    });
    let split = points[slice[mid] as usize][axis];

    let placeholder = nodes.len();
    nodes.push(Node {
        axis: axis as u8,
        split,
        left: NO_CHILD,
        right: NO_CHILD,
        start: 0,
        end: 0,
    });
    let left = build_node(points, order, start, start + mid, nodes);
    let right = build_node(points, order, start + mid, end, nodes);
    nodes[placeholder].left = left;
    nodes[placeholder].right = right;
    placeholder as u32
}

/// Builds the symmetrized kNN graph: edge `{i, j}` is present iff `j` is
/// among the `k` nearest of `i` or `i` among the `k` nearest of `j` (union).
/// Distance ties resolve to the lower index; `k` is capped at `n - 1`.
pub fn build_knn_graph(cloud: &PointCloud, k: usize) -> Result<NeighborGraph, SpatialError> {
    let n = cloud.len();
    if n < 2 {
        return Err(SpatialError::TooFewPoints { actual: n });
    }
    let k = k.max(1).min(n - 1);
    let index = SpatialIndex::build(cloud);

    let per_point: Vec<Vec<(u32, u32)>> = crate::exec::chunked(n, crate::exec::ROW_CHUNK, |range| {
        let mut local = Vec::new();
        for i in range {
            // k+1 because the query point matches itself at distance 0.
            let mut taken = 0;
            for (j, _) in index.k_nearest(&cloud[i], k + 1) {
                if j == i {
                    continue;
                }
                if taken == k {
                    break;
                }
                taken += 1;
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                local.push((a as u32, b as u32));
            }
        }
        local
    });

    let mut edges: Vec<(u32, u32)> = per_point.into_iter().flatten().collect();
    edges.sort_unstable();
    edges.dedup();
    Ok(NeighborGraph { n, edges })
}
