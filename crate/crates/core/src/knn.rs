//! Exact k-nearest-neighbor queries over projected vertex sites.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Point2;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// For each query, `k` site indices and their Euclidean distances in
/// ascending order (ties by smaller site index).
#[derive(Debug, Clone, PartialEq)]
pub struct KnnTable {
    k: usize,
    indices: Vec<u32>,
    distances: Vec<f64>,
}

impl KnnTable {
    pub fn from_parts(k: usize, indices: Vec<u32>, distances: Vec<f64>) -> Result<Self> {
        if k == 0 || indices.len() != distances.len() || indices.len() % k != 0 {
            return Err(Error::Shape(format!(
                "knn table with k={k} has {} indices and {} distances",
                indices.len(),
                distances.len()
            )));
        }
        Ok(KnnTable { k, indices, distances })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn neighbors(&self, query: usize) -> (&[u32], &[f64]) {
        let r = query * self.k..(query + 1) * self.k;
        (&self.indices[r.clone()], &self.distances[r])
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }
}

#[derive(Debug, Clone, Copy)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static 2D kd-tree.
#[derive(Debug, Clone)]
pub struct KdTree {
    sites: Vec<Point2<f64>>,
    order: Vec<u32>,
    nodes: Vec<Node>,
}

const KD_LEAF: usize = 8;

/// Max-heap entry: the worst candidate sits on top.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: u32,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.index.cmp(&other.index))
    }
}

impl KdTree {
    pub fn build(sites: &[Point2<f64>]) -> Self {
        let mut tree = KdTree {
            sites: sites.to_vec(),
            order: (0..sites.len() as u32).collect(),
            nodes: Vec::new(),
        };
        if !sites.is_empty() {
            tree.build_node(0, sites.len());
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let idx = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= KD_LEAF {
            return idx;
        }
        let slice = &self.order[start..end];
        let spread = |axis: usize| {
            let (lo, hi) = slice.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                let v = self.sites[i as usize][axis];
                (lo.min(v), hi.max(v))
            });
            hi - lo
        };
        let axis = if spread(0) >= spread(1) { 0 } else { 1 };
        let sites = &self.sites;
        self.order[start..end].sort_by(|&a, &b| {
            sites[a as usize][axis]
                .total_cmp(&sites[b as usize][axis])
                .then(a.cmp(&b))
        });
        let mid = start + (end - start) / 2;
        let value = self.sites[self.order[mid] as usize][axis];
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[idx] = Node::Split { axis, value, left, right };
        idx
    }

    /// The `k` nearest sites to `q`, ascending by distance then index.
    pub fn nearest(&self, q: &Point2<f64>, k: usize) -> Vec<(u32, f64)> {
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.search(0, q, k, &mut heap);
        }
        heap.into_sorted_vec()
            .into_iter()
            .map(|c| (c.index, c.dist2.sqrt()))
            .collect()
    }

    fn search(&self, node: usize, q: &Point2<f64>, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = self.sites[i as usize] - q;
                    let cand = Candidate {
                        dist2: d.x * d.x + d.y * d.y,
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                // Equal distances must still be visited for the index tie-break.
                if heap.len() < k || diff * diff <= heap.peek().expect("heap is full").dist2 {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

/// Exact k-NN of every query among `sites`, evaluated in parallel.
pub fn knn_projected(sites: &[Point2<f64>], queries: &[Point2<f64>], k: usize) -> Result<KnnTable> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if sites.len() < k {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {} available sites",
            sites.len()
        )));
    }
    let tree = KdTree::build(sites);
    let rows: Vec<Vec<(u32, f64)>> = queries.par_iter().map(|q| tree.nearest(q, k)).collect();
    let mut indices = Vec::with_capacity(queries.len() * k);
    let mut distances = Vec::with_capacity(queries.len() * k);
    for (qi, row) in rows.into_iter().enumerate() {
        for (i, d) in row {
            if d == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "query {qi} coincides with site {i}"
                )));
            }
            indices.push(i);
            distances.push(d);
        }
    }
    KnnTable::from_parts(k, indices, distances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exhaustive(sites: &[Point2<f64>], q: &Point2<f64>, k: usize) -> Vec<(u32, f64)> {
        let mut all: Vec<(u32, f64)> = sites.iter().enumerate().map(|(i, s)| (i as u32, (s - q).norm())).collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn line_of_sites() {
        let sites: Vec<_> = (0..10).map(|x| Point2::new(x as f64, 0.0)).collect();
        let t = knn_projected(&sites, &[Point2::new(0.4, 0.0)], 2).unwrap();
        let (idx, d) = t.neighbors(0);
        assert_eq!(idx, &[0, 1]);
        assert!((d[0] - 0.4).abs() < 1e-15 && (d[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn k_equals_site_count_returns_everything() {
        let sites: Vec<_> = (0..7).map(|x| Point2::new(x as f64, (x * x) as f64 * 0.1)).collect();
        let q = Point2::new(3.3, -0.5);
        let t = knn_projected(&sites, &[q], 7).unwrap();
        let (idx, d) = t.neighbors(0);
        let mut sorted = idx.to_vec();
        sorted.sort();
        assert_eq!(sorted, (0..7).collect::<Vec<_>>());
        assert!(d.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn too_few_sites_and_coincident_queries() {
        let sites = vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)];
        assert!(knn_projected(&sites, &[Point2::new(0.5, 0.5)], 3).is_err());
        assert!(knn_projected(&sites, &[Point2::new(1.0, 0.0)], 1).is_err());
    }

    #[test]
    fn ties_prefer_smaller_index() {
        let sites = vec![Point2::new(1.0, 0.0), Point2::new(-1.0, 0.0), Point2::new(0.0, 1.0), Point2::new(0.0, -1.0)];
        let t = knn_projected(&sites, &[Point2::new(0.0, 0.0)], 3).unwrap();
        assert_eq!(t.neighbors(0).0, &[0, 1, 2]);
    }

    #[test]
    fn random_queries_match_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sites: Vec<_> = (0..500).map(|_| Point2::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0))).collect();
        let queries: Vec<_> = (0..500).map(|_| Point2::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0))).collect();
        let t = knn_projected(&sites, &queries, 11).unwrap();
        for (qi, q) in queries.iter().enumerate() {
            let (idx, d) = t.neighbors(qi);
            let want = exhaustive(&sites, q, 11);
            assert_eq!(idx, want.iter().map(|w| w.0).collect::<Vec<_>>().as_slice());
            for (j, &i) in idx.iter().enumerate() {
                assert!((d[j] - (sites[i as usize] - q).norm()).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn lattice_ties_match_exhaustive_scan() {
        // Integer lattices produce many equal distances.
        let sites: Vec<_> = (0..15).flat_map(|r| (0..15).map(move |c| Point2::new(c as f64 * 2.0, r as f64 * 2.0))).collect();
        let queries: Vec<_> = (0..29).flat_map(|r| (0..29).map(move |c| Point2::new(c as f64, r as f64))).filter(|p| (p.x as i64 % 2 == 1) || (p.y as i64 % 2 == 1)).collect();
        let t = knn_projected(&sites, &queries, 5).unwrap();
        for (qi, q) in queries.iter().enumerate() {
            let want: Vec<u32> = exhaustive(&sites, q, 5).iter().map(|w| w.0).collect();
            assert_eq!(t.neighbors(qi).0, want.as_slice());
        }
    }
}
