//! Exact nearest-neighbour index over 3D points.
//!
//! Ties on distance are broken by the lower point index, so results agree
//! bit-for-bit with a linear scan that keeps the first minimum.

use std::cmp::Ordering;

use crate::geometry::{Point3, PointCloud};
use crate::scalar::Real;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node<T> {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: T,
        left: usize,
        right: usize,
    },
}

/// Static k-d tree; immutable after build and shareable across threads.
#[derive(Debug, Clone)]
pub struct KdTree<T: Real> {
    points: Vec<Point3<T>>,
    order: Vec<usize>,
    nodes: Vec<Node<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor<T> {
    pub index: usize,
    pub dist2: T,
}

impl<T: Real> Neighbor<T> {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .partial_cmp(&other.dist2)
            .unwrap_or(Ordering::Equal)
            .then(self.index.cmp(&other.index))
    }
}

impl<T: Real> KdTree<T> {
    pub fn build(cloud: &PointCloud<T>) -> Self {
        Self::from_points(cloud.points())
    }

    pub fn from_points(points: &[Point3<T>]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &Point3<T> {
        &self.points[index]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // split along the axis of largest extent
        let mut lo = self.points[self.order[start]];
        let mut hi = lo;
        for &i in &self.order[start..end] {
            let p = &self.points[i];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = hi - lo;
        let axis = (0..3)
            .max_by(|&a, &b| extent[a].partial_cmp(&extent[b]).unwrap_or(Ordering::Equal))
            .unwrap_or(0);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis]
                .partial_cmp(&points[b][axis])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Exact nearest neighbour of `q`. `None` only for an empty tree.
    pub fn nearest(&self, q: &Point3<T>) -> Option<Neighbor<T>> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = Neighbor {
            index: usize::MAX,
            dist2: T::max_value().unwrap_or_else(|| T::lit(f64::MAX)),
        };
        self.nearest_rec(0, q, &mut best);
        Some(best)
    }

    fn nearest_rec(&self, node: usize, q: &Point3<T>, best: &mut Neighbor<T>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = Neighbor {
                        index: i,
                        dist2: (self.points[i] - q).norm_squared(),
                    };
                    if cand.key_cmp(best) == Ordering::Less {
                        *best = cand;
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < T::zero() {
                    (left, right)
                } else {
                    (right, left)
                };
                self.nearest_rec(near, q, best);
                // `<=` keeps equal-distance, lower-index candidates reachable.
                if diff * diff <= best.dist2 {
                    self.nearest_rec(far, q, best);
                }
            }
        }
    }

    /// The `k` nearest neighbours sorted by (distance, index).
    pub fn knn(&self, q: &Point3<T>, k: usize) -> Vec<Neighbor<T>> {
        let mut heap: Vec<Neighbor<T>> = Vec::with_capacity(k + 1);
        if k == 0 || self.nodes.is_empty() {
            return heap;
        }
        self.knn_rec(0, q, k, &mut heap);
        heap
    }

    fn knn_rec(&self, node: usize, q: &Point3<T>, k: usize, out: &mut Vec<Neighbor<T>>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = Neighbor {
                        index: i,
                        dist2: (self.points[i] - q).norm_squared(),
                    };
                    if out.len() < k || cand.key_cmp(out.last().unwrap()) == Ordering::Less {
                        let pos = out
                            .binary_search_by(|n| n.key_cmp(&cand))
                            .unwrap_or_else(|p| p);
                        out.insert(pos, cand);
                        out.truncate(k);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < T::zero() {
                    (left, right)
                } else {
                    (right, left)
                };
                self.knn_rec(near, q, k, out);
                if out.len() < k || diff * diff <= out.last().unwrap().dist2 {
                    self.knn_rec(far, q, k, out);
                }
            }
        }
    }

    /// All points with squared distance `<= radius²`, sorted by (distance, index).
    pub fn within_radius(&self, q: &Point3<T>, radius: T) -> Vec<Neighbor<T>> {
        let mut out = Vec::new();
        if !self.nodes.is_empty() {
            self.radius_rec(0, q, radius * radius, &mut out);
        }
        out.sort_by(|a, b| a.key_cmp(b));
        out
    }

    fn radius_rec(&self, node: usize, q: &Point3<T>, r2: T, out: &mut Vec<Neighbor<T>>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = (self.points[i] - q).norm_squared();
                    if d2 <= r2 {
                        out.push(Neighbor { index: i, dist2: d2 });
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                if diff < T::zero() || diff * diff <= r2 {
                    self.radius_rec(left, q, r2, out);
                }
                if diff >= T::zero() || diff * diff <= r2 {
                    self.radius_rec(right, q, r2, out);
                }
            }
        }
    }
}
