//! Exact K-nearest-neighbor search over primitive means.
//!
//! The index is a kd-tree over a snapshot of the means. Results are exact:
//! neighbors come back sorted by squared Euclidean distance, ties broken by
//! the lower primitive index, so they match a brute-force scan bit for bit.

use rayon::prelude::*;

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 12;

/// Row-major `M × K` table of primitive indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighbors {
    k: usize,
    ids: Vec<u32>,
}

impl Neighbors {
    pub fn new(k: usize, ids: Vec<u32>) -> Self {
        assert!(k > 0 && ids.len().is_multiple_of(k), "neighbor table is not M x K");
        Neighbors { k, ids }
    }

    /// Every point sees every primitive `0..n`.
    pub fn dense(m: usize, n: usize) -> Self {
        let ids = (0..m).flat_map(|_| 0..n as u32).collect();
        Neighbors { k: n, ids }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.ids.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    #[inline]
    pub fn row(&self, p: usize) -> &[u32] {
        &self.ids[p * self.k..(p + 1) * self.k]
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Checks that the table has `m` rows and only references `0..n`.
    pub fn check(&self, m: usize, n: usize) -> Result<()> {
        if self.len() != m {
            return Err(Error::invalid(format!(
                "neighbor table has {} rows for {m} points",
                self.len()
            )));
        }
        if let Some(&bad) = self.ids.iter().find(|&&id| id as usize >= n) {
            return Err(Error::OutOfBounds(format!(
                "neighbor id {bad} with only {n} primitives"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Clone, Debug)]
pub struct NeighborIndex {
    points: Vec<[f64; 3]>,
    order: Vec<u32>,
    nodes: Vec<Node>,
    /// Training epoch at which the snapshot was taken.
    pub epoch: usize,
}

#[inline]
pub fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl NeighborIndex {
    /// Builds an index that can serve queries with up to `k` neighbors.
    pub fn build(means: &[[f64; 3]], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        if means.len() < k {
            return Err(Error::invalid(format!(
                "cannot index {} primitives for K = {k}",
                means.len()
            )));
        }
        if means.len() > u32::MAX as usize {
            return Err(Error::invalid("too many primitives for u32 ids"));
        }
        let mut index = NeighborIndex {
            points: means.to_vec(),
            order: (0..means.len() as u32).collect(),
            nodes: Vec::new(),
            epoch: 0,
        };
        index.build_node(0, means.len());
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &o in &self.order[start..end] {
            let p = &self.points[o as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap();
        if !(hi[axis] > lo[axis]) {
            // All points coincide.
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a as usize][axis]
                .total_cmp(&points[b as usize][axis])
                .then(a.cmp(&b))
        });
        let value = self.points[self.order[mid] as usize][axis];
        self.nodes.push(Node::Leaf { start, end });
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

    /// The `k` nearest snapshot means of a single point.
    pub fn query_one(&self, x: &[f64; 3], k: usize, out: &mut Vec<(f64, u32)>) {
        out.clear();
        self.search(0, x, k, out);
    }

    fn search(&self, node: usize, x: &[f64; 3], k: usize, best: &mut Vec<(f64, u32)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &o in &self.order[start..end] {
                    let d = squared_distance(x, &self.points[o as usize]);
                    insert_candidate(best, k, d, o);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = x[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, x, k, best);
                // `<=` keeps equal-distance candidates reachable for tie-breaking.
                if best.len() < k || diff * diff <= best[best.len() - 1].0 {
                    self.search(far, x, k, best);
                }
            }
        }
    }

    /// Nearest `k` primitives for every point, sorted by distance then index.
    pub fn query(&self, points: &[[f64; 3]], k: usize) -> Result<Neighbors> {
        if k == 0 || k > self.len() {
            return Err(Error::invalid(format!(
                "K = {k} outside 1..={} primitives",
                self.len()
            )));
        }
        let ids: Vec<u32> = points
            .par_chunks(1024)
            .flat_map_iter(|chunk| {
                let mut best = Vec::with_capacity(k + 1);
                let mut rows = Vec::with_capacity(chunk.len() * k);
                for x in chunk {
                    self.query_one(x, k, &mut best);
                    rows.extend(best.iter().map(|&(_, id)| id));
                }
                rows
            })
            .collect();
        Ok(Neighbors { k, ids })
    }
}

#[inline]
fn insert_candidate(best: &mut Vec<(f64, u32)>, k: usize, d: f64, id: u32) {
    let worse = |a: &(f64, u32)| a.0 > d || (a.0 == d && a.1 > id);
    if best.len() == k {
        if !worse(&best[k - 1]) {
            return;
        }
        best.pop();
    }
    let pos = best.iter().position(worse).unwrap_or(best.len());
    best.insert(pos, (d, id));
}
