//! Exact k-nearest-neighbor search over a balanced spatial partition.
//!
//! Queries return exactly the neighbor set an exhaustive Euclidean scan
//! would: squared distances accumulate in dimension order, ties break on
//! the lower row index, and subtree pruning only skips regions that
//! cannot contain a better (distance, index) pair.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::scalar::Real;

const DEFAULT_LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node<F> {
    Split {
        dim: usize,
        value: F,
        left: usize,
        right: usize,
    },
    Leaf {
        start: usize,
        end: usize,
    },
}

/// Balanced kd-tree over row-major points.
#[derive(Debug, Clone)]
pub struct KdIndex<F> {
    points: Vec<F>,
    dim: usize,
    rows: usize,
    /// Row indices permuted so each leaf owns a contiguous range.
    order: Vec<usize>,
    nodes: Vec<Node<F>>,
    root: usize,
    leaf_size: usize,
}

/// Candidate ordered by (squared distance, row index); the heap keeps the
/// current worst on top.
struct Candidate<F>(F, usize);

impl<F: Real> PartialEq for Candidate<F> {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0 && self.1 == other.1
    }
}
impl<F: Real> Eq for Candidate<F> {}
impl<F: Real> PartialOrd for Candidate<F> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<F: Real> Ord for Candidate<F> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .partial_cmp(&other.0)
            .expect("distances are finite")
            .then(self.1.cmp(&other.1))
    }
}

/// Squared Euclidean distance accumulated in dimension order, shared by
/// the tree and any scan that must match it exactly.
#[inline]
pub fn squared_distance<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc = d.mul_add(d, acc);
    }
    acc
}

impl<F: Real> KdIndex<F> {
    pub fn build(points: Vec<F>, dim: usize) -> Result<Self> {
        Self::build_with_leaf_size(points, dim, DEFAULT_LEAF_SIZE)
    }

    pub fn build_with_leaf_size(points: Vec<F>, dim: usize, leaf_size: usize) -> Result<Self> {
        if dim == 0 || leaf_size == 0 {
            return Err(Error::config("kd-tree needs dim >= 1 and leaf_size >= 1"));
        }
        if points.is_empty() || points.len() % dim != 0 {
            return Err(Error::config(format!(
                "point buffer of length {} is not a whole number of rows of dimension {dim}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::numeric("kd-tree points must be finite"));
        }
        let rows = points.len() / dim;
        let mut index = KdIndex {
            points,
            dim,
            rows,
            order: (0..rows).collect(),
            nodes: Vec::new(),
            root: 0,
            leaf_size,
        };
        index.root = index.build_node(0, rows);
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn point(&self, row: usize) -> &[F] {
        &self.points[row * self.dim..(row + 1) * self.dim]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let count = end - start;
        if count <= self.leaf_size {
            self.nodes.push(Node::Leaf { start, end });
            return self.nodes.len() - 1;
        }

        // Split on the widest dimension of this subset.
        let mut split_dim = 0;
        let mut best_extent = F::neg_infinity();
        for d in 0..self.dim {
            let mut lo = F::infinity();
            let mut hi = F::neg_infinity();
            for &row in &self.order[start..end] {
                let v = self.points[row * self.dim + d];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let extent = hi - lo;
            if extent > best_extent {
                best_extent = extent;
                split_dim = d;
            }
        }

        let points = &self.points;
        let dim = self.dim;
        self.order[start..end].sort_unstable_by(|&a, &b| {
            points[a * dim + split_dim]
                .partial_cmp(&points[b * dim + split_dim])
                .expect("points are finite")
                .then(a.cmp(&b))
        });
        let mid = start + count / 2;
        let value = self.points[self.order[mid] * self.dim + split_dim];

        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes.push(Node::Split {
            dim: split_dim,
            value,
            left,
            right,
        });
        self.nodes.len() - 1
    }

    /// The `k` nearest rows to `query`, ascending by (distance, row).
    pub fn knn(&self, query: &[F], k: usize) -> Result<Vec<(usize, F)>> {
        if query.len() != self.dim {
            return Err(Error::usage(format!(
                "query of dimension {} does not match index dimension {}",
                query.len(),
                self.dim
            )));
        }
        if k == 0 || k > self.rows {
            return Err(Error::usage(format!(
                "k = {k} is outside 1..={} (index size)",
                self.rows
            )));
        }
        let mut heap: BinaryHeap<Candidate<F>> = BinaryHeap::with_capacity(k + 1);
        self.search(self.root, query, k, &mut heap);

        let mut hits: Vec<Candidate<F>> = heap.into_vec();
        hits.sort_unstable();
        Ok(hits.into_iter().map(|c| (c.1, c.0.sqrt())).collect())
    }

    fn search(&self, node: usize, query: &[F], k: usize, heap: &mut BinaryHeap<Candidate<F>>) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &row in &self.order[*start..*end] {
                    let d2 = squared_distance(query, self.point(row));
                    let candidate = Candidate(d2, row);
                    if heap.len() < k {
                        heap.push(candidate);
                    } else if candidate < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(candidate);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[*dim] - *value;
                let (near, far) = if diff < F::zero() {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.search(near, query, k, heap);
                // Descend the far side unless it provably cannot improve
                // the current worst; on exact ties a lower row index could
                // still win, hence <=.
                let bound = diff * diff;
                if heap.len() < k || bound <= heap.peek().unwrap().0 {
                    self.search(far, query, k, heap);
                }
            }
        }
    }
}

/// Exhaustive k-NN over a row subset with the same distance computation
/// and tie-breaking as the tree; used for candidate-pool queries.
pub fn scan_knn<F: Real>(
    points: &[F],
    dim: usize,
    rows: &[usize],
    query: &[F],
    k: usize,
) -> Result<Vec<(usize, F)>> {
    if k == 0 || k > rows.len() {
        return Err(Error::usage(format!(
            "k = {k} is outside 1..={} (candidate count)",
            rows.len()
        )));
    }
    let mut candidates: Vec<(F, usize)> = rows
        .iter()
        .map(|&row| {
            (
                squared_distance(query, &points[row * dim..(row + 1) * dim]),
                row,
            )
        })
        .collect();
    candidates.sort_unstable_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("distances are finite")
            .then(a.1.cmp(&b.1))
    });
    candidates.truncate(k);
    Ok(candidates.into_iter().map(|(d2, row)| (row, d2.sqrt())).collect())
}
