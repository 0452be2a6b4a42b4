//! Exact k-nearest-neighbor search over a fixed point set.
//!
//! Results are ordered by `(distance, index)`: equal distances resolve to the
//! lower original index, so output is reproducible across platforms.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::model::{Point3, PointCloud};

const BUCKET_SIZE: usize = 8;

/// One neighbor returned by a query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeighborHit {
    /// Position of the neighbor in the indexed point list.
    pub index: usize,
    /// Euclidean distance to the query, meters.
    pub distance: f64,
}

impl NeighborHit {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.index.cmp(&other.index))
    }
}

impl Eq for NeighborHit {}

impl PartialOrd for NeighborHit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for NeighborHit {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key_cmp(other)
    }
}

/// Euclidean distance, summed x, y, z in that order.
///
/// The k-d tree's box bounds use the same summation order so that a bound
/// never exceeds the distance of a point inside the box.
#[inline]
pub fn distance(a: &Point3, b: &Point3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

#[derive(Clone, Debug)]
struct Node {
    lo: [f64; 3],
    hi: [f64; 3],
    kind: NodeKind,
}

#[derive(Clone, Debug)]
enum NodeKind {
    Leaf { start: usize, end: usize },
    Split { left: usize, right: usize },
}

impl Node {
    /// Smallest possible distance from `q` to any point inside the box.
    #[inline]
    fn lower_bound(&self, q: &Point3) -> f64 {
        let gap = |c: f64, lo: f64, hi: f64| {
            if c < lo {
                lo - c
            } else if c > hi {
                c - hi
            } else {
                0.0
            }
        };
        let dx = gap(q.x, self.lo[0], self.hi[0]);
        let dy = gap(q.y, self.lo[1], self.hi[1]);
        let dz = gap(q.z, self.lo[2], self.hi[2]);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// Immutable k-d tree over a point list; point order defines hit indices.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    points: Vec<Point3>,
    /// Tree-order permutation of `0..points.len()`.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

pub fn build_index(cloud: &PointCloud) -> SpatialIndex {
    SpatialIndex::new(cloud.points())
}

impl SpatialIndex {
    pub fn new(points: &[Point3]) -> Self {
        let mut index = SpatialIndex {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            index.build(0, points.len());
        }
        index
    }

    pub fn point_count(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            let p = &self.points[i];
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            lo,
            hi,
            kind: NodeKind::Leaf { start, end },
        });
        if end - start <= BUCKET_SIZE {
            return id;
        }
        let dim = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .expect("three axes");
        if hi[dim] == lo[dim] {
            // all points coincide; keep them in one (oversized) leaf
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][dim].total_cmp(&points[b][dim])
        });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id].kind = NodeKind::Split { left, right };
        id
    }

    /// The `k` nearest points, ascending by `(distance, index)`.
    pub fn knn(&self, query: &Point3, k: usize) -> Result<Vec<NeighborHit>> {
        self.search(query, k, f64::INFINITY)
    }

    /// Like [`knn`](Self::knn) but drops hits farther than `radius`; may be empty.
    pub fn radius_knn(&self, query: &Point3, k: usize, radius: f64) -> Result<Vec<NeighborHit>> {
        if radius.is_nan() || radius <= 0.0 {
            return Err(Error::invalid(format!("radius must be positive, got {radius}")));
        }
        self.search(query, k, radius)
    }

    pub fn nearest(&self, query: &Point3) -> Result<NeighborHit> {
        Ok(self.knn(query, 1)?[0])
    }

    fn search(&self, query: &Point3, k: usize, radius: f64) -> Result<Vec<NeighborHit>> {
        if self.points.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if k == 0 {
            return Err(Error::invalid("k must be positive"));
        }
        if !query.coords.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("query point is not finite"));
        }
        let k = k.min(self.points.len());
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.visit(0, query, k, radius, &mut heap);
        Ok(heap.into_sorted_vec())
    }

    fn visit(
        &self,
        node: usize,
        query: &Point3,
        k: usize,
        radius: f64,
        heap: &mut BinaryHeap<NeighborHit>,
    ) {
        match self.nodes[node].kind {
            NodeKind::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let hit = NeighborHit {
                        index: i,
                        distance: distance(query, &self.points[i]),
                    };
                    if hit.distance > radius {
                        continue;
                    }
                    if heap.len() < k {
                        heap.push(hit);
                    } else if hit < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(hit);
                    }
                }
            }
            NodeKind::Split { left, right } => {
                let dl = self.nodes[left].lower_bound(query);
                let dr = self.nodes[right].lower_bound(query);
                let (first, d_first, second, d_second) = if dl <= dr {
                    (left, dl, right, dr)
                } else {
                    (right, dr, left, dl)
                };
                if self.may_contain(d_first, k, radius, heap) {
                    self.visit(first, query, k, radius, heap);
                }
                if self.may_contain(d_second, k, radius, heap) {
                    self.visit(second, query, k, radius, heap);
                }
            }
        }
    }

    #[inline]
    fn may_contain(&self, bound: f64, k: usize, radius: f64, heap: &BinaryHeap<NeighborHit>) -> bool {
        if bound > radius {
            return false;
        }
        // equal distances must still be visited: a lower index may win the tie
        heap.len() < k || bound <= heap.peek().expect("heap is full").distance
    }
}
