//! Static kd-tree over base-frame points.
//!
//! Supports plain k-nearest queries and nearest queries restricted by a
//! caller-supplied predicate (used by the cross-angle partner search).
//! Results are ordered by `(squared distance, index)`, so queries are
//! deterministic even with ties.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::geometry::Vec3;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist_sq
            .total_cmp(&other.dist_sq)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(points: Vec<Vec3>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        if !points.is_empty() {
            build_node(&points, &mut order, 0, points.len(), &mut nodes);
        }
        Self {
            points,
            order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &Vec3 {
        &self.points[index]
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// The `k` nearest points, closest first.
    pub fn knn(&self, query: &Vec3, k: usize) -> Vec<Neighbor> {
        self.knn_filtered(query, k, f64::INFINITY, |_| true)
    }

    /// Up to `k` nearest points within `max_dist_sq` accepted by `keep`, closest first.
    pub fn knn_filtered<F>(&self, query: &Vec3, k: usize, max_dist_sq: f64, keep: F) -> Vec<Neighbor>
    where
        F: Fn(usize) -> bool,
    {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        let mut search = Search {
            tree: self,
            query,
            k,
            max_dist_sq,
            keep: &keep,
            heap: &mut heap,
        };
        search.visit(0);
        heap.into_sorted_vec()
    }

    /// The nearest point accepted by `keep`, if any lies within `max_dist_sq`.
    pub fn nearest_filtered<F>(&self, query: &Vec3, max_dist_sq: f64, keep: F) -> Option<Neighbor>
    where
        F: Fn(usize) -> bool,
    {
        self.knn_filtered(query, 1, max_dist_sq, keep).into_iter().next()
    }
}

fn build_node(points: &[Vec3], order: &mut [usize], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let slice = &order[start..end];
    let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
    for &i in slice {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let axis = (hi - lo).imax();
    let mid = (end - start) / 2;
    order[start..end].select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
    });
    let value = points[order[start + mid]][axis];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let left = build_node(points, order, start, start + mid, nodes);
    let right = build_node(points, order, start + mid, end, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}

struct Search<'a, F> {
    tree: &'a KdTree,
    query: &'a Vec3,
    k: usize,
    max_dist_sq: f64,
    keep: &'a F,
    heap: &'a mut BinaryHeap<Neighbor>,
}

impl<F: Fn(usize) -> bool> Search<'_, F> {
    fn bound(&self) -> f64 {
        if self.heap.len() < self.k {
            self.max_dist_sq
        } else {
            self.heap.peek().map_or(self.max_dist_sq, |n| n.dist_sq)
        }
    }

    fn visit(&mut self, node: usize) {
        match self.tree.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.tree.order[start..end] {
                    let dist_sq = (self.tree.points[i] - self.query).norm_squared();
                    if dist_sq > self.bound() || !(self.keep)(i) {
                        continue;
                    }
                    let cand = Neighbor { index: i, dist_sq };
                    if self.heap.len() < self.k {
                        self.heap.push(cand);
                    } else if cand < *self.heap.peek().unwrap() {
                        self.heap.pop();
                        self.heap.push(cand);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = self.query[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.visit(near);
                if diff * diff <= self.bound() {
                    self.visit(far);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[Vec3], q: &Vec3, k: usize, keep: impl Fn(usize) -> bool) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = points
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(i, p)| Neighbor {
                index: i,
                dist_sq: (p - q).norm_squared(),
            })
            .collect();
        all.sort();
        all.truncate(k);
        all
    }

    fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn knn_matches_brute_force() {
        let pts = random_points(3000, 1);
        let tree = KdTree::build(pts.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let q = Vec3::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), 0.0);
            assert_eq!(tree.knn(&q, 17), brute(&pts, &q, 17, |_| true));
        }
    }

    #[test]
    fn filtered_nearest_matches_brute_force() {
        let pts = random_points(2000, 3);
        let tree = KdTree::build(pts.clone());
        let q = Vec3::new(0.3, -0.2, 0.0);
        let keep = |i: usize| i % 7 == 3;
        let got = tree.nearest_filtered(&q, f64::INFINITY, keep).unwrap();
        assert_eq!(got, brute(&pts, &q, 1, keep)[0]);
        assert!(tree.nearest_filtered(&q, 1e-12, keep).is_none());
    }

    #[test]
    fn degenerate_sizes() {
        let empty = KdTree::build(Vec::new());
        assert!(empty.knn(&Vec3::zeros(), 3).is_empty());
        let same = KdTree::build(vec![Vec3::new(1.0, 1.0, 1.0); 40]);
        let nn = same.knn(&Vec3::zeros(), 5);
        assert_eq!(nn.iter().map(|n| n.index).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    }
}
