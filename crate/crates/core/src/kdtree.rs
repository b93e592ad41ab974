//! Static k-d tree for exact k-nearest-neighbour queries.
//!
//! Points are stored in insertion order and identified by that index.
//! Neighbours are ordered by `(squared distance, index)`, so equidistant
//! points resolve to the one inserted first and every query has a single
//! well-defined answer.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    /// Point indices, grouped so each leaf owns a contiguous range.
    order: Vec<usize>,
    /// `points` permuted by `order`, so leaf scans read memory in sequence.
    packed: Vec<[f64; D]>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dist_sq<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl<const D: usize> KdTree<D> {
    pub fn build(points: Vec<[f64; D]>) -> Self {
        let mut tree = KdTree {
            order: (0..points.len()).collect(),
            points,
            packed: Vec::new(),
            nodes: Vec::new(),
        };
        if !tree.points.is_empty() {
            tree.build_node(0, tree.points.len());
        }
        tree.packed = tree.order.iter().map(|&i| tree.points[i]).collect();
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= LEAF_SIZE {
            return id;
        }
        // split on the widest coordinate
        let mut best = (0, -1.0);
        for d in 0..D {
            let (lo, hi) = self.order[start..end].iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                let v = self.points[i][d];
                (lo.min(v), hi.max(v))
            });
            if hi - lo > best.1 {
                best = (d, hi - lo);
            }
        }
        let (dim, spread) = best;
        if spread <= 0.0 {
            return id; // all points coincide
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| points[a][dim].total_cmp(&points[b][dim]).then(a.cmp(&b)));
        let value = self.points[self.order[mid]][dim];
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { dim, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &[f64; D] {
        &self.points[index]
    }

    pub fn points(&self) -> &[[f64; D]] {
        &self.points
    }

    /// The `min(k, len)` nearest points to `query`, closest first.
    pub fn nearest(&self, query: &[f64; D], k: usize) -> Vec<Neighbor> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, &mut heap, &mut [0.0; D], 0.0);
        heap.into_sorted_vec()
            .into_iter()
            .map(|Candidate(dist_sq, index)| Neighbor { index, dist_sq })
            .collect()
    }

    /// `offset` holds the per-axis gap between `query` and the current
    /// cell and `bound` the sum of its squares, a lower bound on the
    /// distance to anything inside the cell.
    fn search(&self, node: usize, query: &[f64; D], k: usize, heap: &mut BinaryHeap<Candidate>, offset: &mut [f64; D], bound: f64) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for (p, &i) in self.packed[start..end].iter().zip(&self.order[start..end]) {
                    let c = Candidate(dist_sq(p, query), i);
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = query[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, heap, offset, bound);
                let old = offset[dim];
                let far_bound = bound - old * old + diff * diff;
                // `<=` keeps equidistant points with smaller indices reachable
                if heap.len() < k || far_bound <= heap.peek().expect("heap is non-empty").0 {
                    offset[dim] = diff;
                    self.search(far, query, k, heap, offset, far_bound);
                    offset[dim] = old;
                }
            }
        }
    }
}
