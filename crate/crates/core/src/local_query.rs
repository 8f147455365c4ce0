//! Exact k-NN search over one [`LocalTree`].
//!
//! Stack-driven traversal: the near child is pushed last so it is searched
//! first, the far child only when its lower bound can still beat the
//! current k-th distance. Bounds are squared and kept exact with a
//! per-dimension offset vector: descending into a far child replaces that
//! dimension's offset rather than adding to it, so a dimension split twice
//! on one path is never double counted.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::local_tree::{LocalTree, NodeRef};
use crate::neighbor::{KnnResult, Neighbor};

/// Traversal counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VisitStats {
    pub nodes_visited: u64,
    pub buckets_scanned: u64,
    pub points_compared: u64,
}

impl VisitStats {
    pub fn add(&mut self, o: &VisitStats) {
        self.nodes_visited += o.nodes_visited;
        self.buckets_scanned += o.buckets_scanned;
        self.points_compared += o.points_compared;
    }
}

/// Observation hooks; `()` compiles them away.
pub trait Probe {
    fn visit(&mut self, _node: NodeRef) {}
    fn scan(&mut self, _points: usize) {}
    /// A subtree was skipped because `bound` could not beat `r_prime`.
    fn prune(&mut self, _node: NodeRef, _bound: f64, _r_prime: f64) {}
}

impl Probe for () {}

impl Probe for VisitStats {
    fn visit(&mut self, _node: NodeRef) {
        self.nodes_visited += 1;
    }

    fn scan(&mut self, points: usize) {
        self.buckets_scanned += 1;
        self.points_compared += points as u64;
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    sq_dist: f64,
    id: u64,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sq_dist
            .total_cmp(&other.sq_dist)
            .then(self.id.cmp(&other.id))
    }
}

#[derive(Debug, Clone, Copy)]
struct Frame {
    node: NodeRef,
    bound: f64,
}

/// Reusable scratch for repeated queries against one tree.
#[derive(Debug, Default)]
pub struct Searcher {
    stack: Vec<Frame>,
    /// Per-dimension plane offsets; frame `i` owns `offsets[i*dims..(i+1)*dims]`.
    offsets: Vec<f64>,
    dists: Vec<f64>,
    heap: BinaryHeap<Candidate>,
}

impl Searcher {
    pub fn new() -> Self {
        Self::default()
    }

    /// Up to `k` nearest points with `sq_dist < sq_radius`.
    pub fn search<P: Probe>(
        &mut self,
        tree: &LocalTree,
        q: &[f64],
        k: usize,
        sq_radius: f64,
        probe: &mut P,
    ) -> Result<KnnResult> {
        if k == 0 {
            return Err(Error::ZeroK);
        }
        let dims = tree.dims();
        if q.len() != dims {
            return Err(Error::DimMismatch {
                expected: dims,
                got: q.len(),
            });
        }
        self.heap.clear();
        self.stack.clear();
        let Some(root) = tree.root() else {
            return Ok(KnnResult::empty(0));
        };
        let points = tree.points();
        let ids = points.ids();
        let cols = points.columns();
        let need = (tree.depth() + 2) * dims;
        if self.offsets.len() < need {
            self.offsets.resize(need, 0.0);
        }
        self.offsets[..dims].fill(0.0);
        self.stack.push(Frame {
            node: root,
            bound: 0.0,
        });

        // While the heap is short, a candidate must beat the caller's radius
        // strictly. Once full it must beat the heap's largest (sq_dist, id)
        // key, so a subtree whose bound equals the k-th distance can still
        // hold a winner with a smaller id and is kept.
        let admissible = |heap: &BinaryHeap<Candidate>, bound: f64| -> bool {
            if heap.len() < k {
                bound < sq_radius
            } else {
                bound <= heap.peek().map_or(f64::INFINITY, |c| c.sq_dist)
            }
        };
        let r_prime = |heap: &BinaryHeap<Candidate>| -> f64 {
            if heap.len() < k {
                sq_radius
            } else {
                heap.peek().map_or(f64::INFINITY, |c| c.sq_dist)
            }
        };

        while let Some(frame) = self.stack.pop() {
            let slot = self.stack.len();
            if !admissible(&self.heap, frame.bound) {
                probe.prune(frame.node, frame.bound, r_prime(&self.heap));
                continue;
            }
            probe.visit(frame.node);
            match frame.node {
                NodeRef::Leaf(l) => {
                    let rows = tree.leaves()[l as usize].rows();
                    probe.scan(rows.len());
                    let len = rows.len();
                    self.dists.clear();
                    self.dists.resize(len, 0.0);
                    for (col, &qd) in cols.iter().zip(q) {
                        let col = &col[rows.clone()];
                        for (acc, &x) in self.dists.iter_mut().zip(col) {
                            let diff = x - qd;
                            *acc += diff * diff;
                        }
                    }
                    for (j, &d) in self.dists.iter().enumerate() {
                        let cand = Candidate {
                            sq_dist: d,
                            id: ids[rows.start + j],
                        };
                        if self.heap.len() < k {
                            if d < sq_radius {
                                self.heap.push(cand);
                            }
                        } else if let Some(mut top) = self.heap.peek_mut() {
                            if cand < *top {
                                *top = cand;
                            }
                        }
                    }
                }
                NodeRef::Interior(i) => {
                    let node = &tree.nodes()[i as usize];
                    let dim = node.plane.dim;
                    let diff = q[dim] - node.plane.value;
                    let (near, far) = if diff < 0.0 {
                        (node.left, node.right)
                    } else {
                        (node.right, node.left)
                    };
                    let base = slot * dims;
                    let mut far_bound = 0.0;
                    for d in 0..dims {
                        let off = if d == dim {
                            diff
                        } else {
                            self.offsets[base + d]
                        };
                        far_bound += off * off;
                    }
                    if admissible(&self.heap, far_bound) {
                        if self.offsets.len() < base + 2 * dims {
                            self.offsets.resize(base + 2 * dims, 0.0);
                        }
                        self.offsets.copy_within(base..base + dims, base + dims);
                        self.offsets[base + dim] = diff;
                        self.stack.push(Frame {
                            node: far,
                            bound: far_bound,
                        });
                    } else {
                        probe.prune(far, far_bound, r_prime(&self.heap));
                    }
                    self.stack.push(Frame {
                        node: near,
                        bound: frame.bound,
                    });
                }
            }
        }

        let mut neighbors: Vec<Neighbor> = self
            .heap
            .drain()
            .map(|c| Neighbor::new(c.sq_dist, c.id, 0))
            .collect();
        neighbors.sort_by(Neighbor::key_cmp);
        Ok(KnnResult::from_unsorted(0, neighbors, k))
    }
}

/// The `k` nearest points to `q` with squared distance below `sq_radius`
/// (pass `f64::INFINITY` for an unbounded search).
pub fn find_knn(tree: &LocalTree, q: &[f64], k: usize, sq_radius: f64) -> Result<KnnResult> {
    Searcher::new().search(tree, q, k, sq_radius, &mut ())
}

/// Same traversal as [`find_knn`], with counters.
pub fn count_visited(
    tree: &LocalTree,
    q: &[f64],
    k: usize,
    sq_radius: f64,
) -> Result<(KnnResult, VisitStats)> {
    let mut stats = VisitStats::default();
    let res = Searcher::new().search(tree, q, k, sq_radius, &mut stats)?;
    Ok((res, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local_tree::{build_local_tree, BuildConfig};
    use crate::points::PointSet;
    use crate::squared_distance;
    use rand::Rng;

    fn uniform(n: usize, dims: usize, seed: u64) -> PointSet {
        let mut rng = crate::seed::rng(seed);
        let coords = (0..dims)
            .map(|_| (0..n).map(|_| rng.random::<f64>()).collect())
            .collect();
        PointSet::new(coords, (0..n as u64).collect()).unwrap()
    }

    fn tree(ps: &PointSet, bucket: usize) -> LocalTree {
        let cfg = BuildConfig {
            bucket_size: bucket,
            ..Default::default()
        };
        build_local_tree(ps, &cfg).unwrap()
    }

    /// Sorted (sq_dist, id) of every point under `sq_radius`, truncated to k.
    fn scan(ps: &PointSet, q: &[f64], k: usize, sq_radius: f64) -> Vec<(f64, u64)> {
        let mut all: Vec<(f64, u64)> = (0..ps.len())
            .map(|r| (squared_distance(q, &ps.row(r)), ps.ids()[r]))
            .filter(|(d, _)| *d < sq_radius)
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.truncate(k);
        all
    }

    fn pairs(r: &KnnResult) -> Vec<(f64, u64)> {
        r.neighbors
            .iter()
            .map(|n| (n.sq_dist, n.point_id))
            .collect()
    }

    #[test]
    fn single_point_tree() {
        let ps = PointSet::from_rows(2, &[vec![1.0, 2.0]]).unwrap();
        let t = tree(&ps, 32);
        let r = find_knn(&t, &[4.0, 6.0], 1, f64::INFINITY).unwrap();
        assert_eq!(pairs(&r), vec![(25.0, 0)]);
        assert_eq!(r.r_prime, 25.0);
    }

    #[test]
    fn exact_hit_prefers_lowest_id() {
        let rows = vec![
            vec![0.5, 0.5],
            vec![0.1, 0.1],
            vec![0.5, 0.5],
            vec![0.9, 0.2],
        ];
        let ps = PointSet::from_rows_with_ids(2, &rows, vec![10, 11, 3, 12]).unwrap();
        let t = tree(&ps, 1);
        let r = find_knn(&t, &[0.5, 0.5], 1, f64::INFINITY).unwrap();
        assert_eq!(pairs(&r), vec![(0.0, 3)]);
    }

    #[test]
    fn errors_and_empty_tree() {
        let ps = uniform(10, 2, 1);
        let t = tree(&ps, 4);
        assert_eq!(
            find_knn(&t, &[0.0, 0.0], 0, f64::INFINITY),
            Err(Error::ZeroK)
        );
        assert!(matches!(
            find_knn(&t, &[0.0], 1, f64::INFINITY),
            Err(Error::DimMismatch { .. })
        ));
        let empty = tree(&PointSet::empty(2), 4);
        assert!(find_knn(&empty, &[0.0, 0.0], 3, f64::INFINITY)
            .unwrap()
            .neighbors
            .is_empty());
    }

    #[test]
    fn matches_linear_scan_on_uniform_data() {
        let ps = uniform(100_000, 3, 21);
        let t = tree(&ps, 32);
        let mut rng = crate::seed::rng(22);
        let mut s = Searcher::new();
        for _ in 0..1000 {
            let q: Vec<f64> = (0..3).map(|_| rng.random()).collect();
            let got = s.search(&t, &q, 5, f64::INFINITY, &mut ()).unwrap();
            assert_eq!(pairs(&got), scan(&ps, &q, 5, f64::INFINITY));
            let r = 0.05 * 0.05;
            let got = s.search(&t, &q, 5, r, &mut ()).unwrap();
            assert_eq!(pairs(&got), scan(&ps, &q, 5, r));
        }
    }

    #[test]
    fn exhaustive_small_instances_with_duplicates() {
        for seed in 0..30u64 {
            let mut rng = crate::seed::rng(seed);
            let n = rng.random_range(1..300);
            let dims = [1, 2, 3, 5][seed as usize % 4];
            // coarse grid so duplicates and on-plane points are common
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..dims)
                        .map(|_| rng.random_range(0..6) as f64 * 0.1)
                        .collect()
                })
                .collect();
            let ps = PointSet::from_rows(dims, &rows).unwrap();
            let t = tree(&ps, 1 + seed as usize % 5);
            t.check_invariants().unwrap();
            for _ in 0..40 {
                let q: Vec<f64> = (0..dims)
                    .map(|_| rng.random_range(-1..7) as f64 * 0.1)
                    .collect();
                for k in [1, 3, n] {
                    let got = find_knn(&t, &q, k, f64::INFINITY).unwrap();
                    assert_eq!(pairs(&got), scan(&ps, &q, k, f64::INFINITY));
                }
            }
        }
    }

    #[test]
    fn repeated_dimension_does_not_overestimate_bounds() {
        // 1-D data splits the same axis at every level; the query sits far
        // left so the correct answer lies behind two far-child descents.
        let rows: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64]).collect();
        let ps = PointSet::from_rows(1, &rows).unwrap();
        let t = tree(&ps, 2);
        for qx in [-5.0, 0.5, 17.5, 31.9, 70.0] {
            for k in [1, 2, 7, 64] {
                let got = find_knn(&t, &[qx], k, f64::INFINITY).unwrap();
                assert_eq!(pairs(&got), scan(&ps, &[qx], k, f64::INFINITY));
            }
        }
    }

    #[test]
    fn visit_counts() {
        let ps = uniform(20, 3, 2);
        let t = tree(&ps, 32);
        let (_, st) = count_visited(&t, &[0.5, 0.5, 0.5], 3, f64::INFINITY).unwrap();
        assert_eq!((st.nodes_visited, st.buckets_scanned), (1, 1));

        let ps = uniform(5000, 3, 3);
        let t = tree(&ps, 32);
        let (_, st) = count_visited(&t, &[0.5, 0.5, 0.5], 5000, f64::INFINITY).unwrap();
        assert_eq!(st.buckets_scanned as usize, t.leaves().len());
        assert_eq!(st.points_compared, 5000);
    }

    #[derive(Default)]
    struct Trace {
        first_leaf: Option<u32>,
        pruned: Vec<(NodeRef, f64)>,
    }

    impl Probe for Trace {
        fn visit(&mut self, node: NodeRef) {
            if let (None, NodeRef::Leaf(l)) = (self.first_leaf, node) {
                self.first_leaf = Some(l);
            }
        }
        fn prune(&mut self, node: NodeRef, _bound: f64, r_prime: f64) {
            self.pruned.push((node, r_prime));
        }
    }

    #[test]
    fn pruned_subtrees_hold_nothing_closer_than_r_prime() {
        let ps = uniform(3000, 3, 4);
        let t = tree(&ps, 8);
        let mut rng = crate::seed::rng(5);
        let mut s = Searcher::new();
        let mut total = 0;
        for _ in 0..200 {
            let q: Vec<f64> = (0..3).map(|_| rng.random()).collect();
            let mut tr = Trace::default();
            s.search(&t, &q, 4, f64::INFINITY, &mut tr).unwrap();
            let mut prev = f64::INFINITY;
            for &(node, r_prime) in &tr.pruned {
                // r' observed at pruning time never grows
                assert!(r_prime <= prev);
                prev = r_prime;
                for row in t.subtree_rows(node) {
                    let d = squared_distance(&q, &t.points().row(row));
                    assert!(d >= r_prime, "pruned point at {d} < {r_prime}");
                }
            }
            total += tr.pruned.len();
        }
        assert!(total > 0);
    }

    #[test]
    fn near_child_is_scanned_first() {
        let ps = uniform(4000, 2, 6);
        let t = tree(&ps, 16);
        for l in (0..t.leaves().len()).step_by(7) {
            let row = t.leaves()[l].rows().start;
            let q = t.points().row(row);
            let mut tr = Trace::default();
            Searcher::new()
                .search(&t, &q, 1, f64::INFINITY, &mut tr)
                .unwrap();
            assert_eq!(tr.first_leaf, Some(l as u32));
        }
    }
}
