//! Per-rank kd-tree construction.
//!
//! Upper levels are built breadth-first with every worker cooperating on
//! each node (parallel histograms and partitions). Once the frontier holds
//! `workers * branch_factor_per_worker` splittable subtrees, each subtree is
//! built depth-first by a single worker. A final pass lays the nodes out in
//! preorder and packs every bucket's points contiguously, so the output does
//! not depend on how the work was split.

use std::ops::Range;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::SplitPlane;
use crate::median::{self, build_intervals_with_stride, median_boundary, sample_indices};
use crate::points::PointSet;
use crate::seed;

/// Partitions smaller than this are done on the calling thread.
const PAR_PARTITION_MIN: usize = 1 << 14;

#[derive(Debug, Clone, PartialEq)]
pub struct BuildConfig {
    pub bucket_size: usize,
    pub local_sample_m: usize,
    pub variance_sample: usize,
    pub branch_factor_per_worker: usize,
    pub seed: u64,
    pub workers: usize,
    /// Coarse-index stride for histogram bin location.
    pub stride: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            bucket_size: 32,
            local_sample_m: median::LOCAL_SAMPLE_M,
            variance_sample: 1024,
            branch_factor_per_worker: 10,
            seed: 0,
            workers: 1,
            stride: median::DEFAULT_STRIDE,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bucket_size", self.bucket_size),
            ("local_sample_m", self.local_sample_m),
            ("variance_sample", self.variance_sample),
            ("branch_factor_per_worker", self.branch_factor_per_worker),
            ("workers", self.workers),
            ("stride", self.stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRef {
    Interior(u32),
    Leaf(u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interior {
    pub plane: SplitPlane,
    pub left: NodeRef,
    pub right: NodeRef,
    /// Points below this node.
    pub count: u64,
}

/// A leaf: rows `start..start + len` of the packed points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bucket {
    pub start: u64,
    pub len: u64,
}

impl Bucket {
    pub fn rows(&self) -> Range<usize> {
        self.start as usize..(self.start + self.len) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTree {
    pub(crate) root: Option<NodeRef>,
    pub(crate) nodes: Vec<Interior>,
    pub(crate) leaves: Vec<Bucket>,
    pub(crate) points: PointSet,
    pub(crate) depth: usize,
    pub(crate) bucket_size: usize,
}

impl LocalTree {
    pub fn empty(dims: usize, bucket_size: usize) -> Self {
        Self {
            root: None,
            nodes: Vec::new(),
            leaves: Vec::new(),
            points: PointSet::empty(dims),
            depth: 0,
            bucket_size,
        }
    }

    /// Reassembles a tree from its arrays, checking every structural invariant.
    pub fn from_parts(
        root: Option<NodeRef>,
        nodes: Vec<Interior>,
        leaves: Vec<Bucket>,
        points: PointSet,
        bucket_size: usize,
    ) -> Result<Self> {
        let mut tree = Self {
            root,
            nodes,
            leaves,
            points,
            depth: 0,
            bucket_size,
        };
        tree.depth = tree.check_invariants().map_err(Error::Format)?;
        Ok(tree)
    }

    pub fn root(&self) -> Option<NodeRef> {
        self.root
    }

    pub fn nodes(&self) -> &[Interior] {
        &self.nodes
    }

    pub fn leaves(&self) -> &[Bucket] {
        &self.leaves
    }

    /// Points reordered so each bucket is contiguous.
    pub fn points(&self) -> &PointSet {
        &self.points
    }

    pub fn dims(&self) -> usize {
        self.points.dims()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn bucket_size(&self) -> usize {
        self.bucket_size
    }

    /// Leaves holding more than `bucket_size` identical points.
    pub fn degenerate_leaves(&self) -> usize {
        self.leaves
            .iter()
            .filter(|b| b.len as usize > self.bucket_size)
            .count()
    }

    /// Packed rows under `node`. Preorder layout keeps every subtree contiguous.
    pub fn subtree_rows(&self, node: NodeRef) -> Range<usize> {
        let mut lo = node;
        while let NodeRef::Interior(i) = lo {
            lo = self.nodes[i as usize].left;
        }
        let mut hi = node;
        while let NodeRef::Interior(i) = hi {
            hi = self.nodes[i as usize].right;
        }
        match (lo, hi) {
            (NodeRef::Leaf(a), NodeRef::Leaf(b)) => {
                self.leaves[a as usize].start as usize..self.leaves[b as usize].rows().end
            }
            _ => unreachable!(),
        }
    }

    /// Verifies partition, plane consistency, bucket bounds and counts.
    /// Returns the depth.
    pub fn check_invariants(&self) -> std::result::Result<usize, String> {
        let n = self.points.len();
        let Some(root) = self.root else {
            if n != 0 || !self.nodes.is_empty() || !self.leaves.is_empty() {
                return Err("rootless tree with content".into());
            }
            return Ok(0);
        };
        let dims = self.points.dims();
        let mut next_row = 0u64;
        let mut leaves_seen = 0usize;
        let mut nodes_seen = 0usize;
        let mut depth = 0usize;
        // (node, depth, lower bound per dim, upper bound per dim)
        let mut stack = vec![(
            root,
            0usize,
            vec![f64::NEG_INFINITY; dims],
            vec![f64::INFINITY; dims],
        )];
        while let Some((node, d, lo, hi)) = stack.pop() {
            depth = depth.max(d);
            match node {
                NodeRef::Leaf(i) => {
                    let b = *self
                        .leaves
                        .get(i as usize)
                        .ok_or_else(|| format!("leaf {i} out of range"))?;
                    leaves_seen += 1;
                    if b.start != next_row {
                        return Err(format!("leaf {i} starts at {} not {next_row}", b.start));
                    }
                    if b.len == 0 && n > 0 {
                        return Err(format!("leaf {i} is empty"));
                    }
                    next_row += b.len;
                    if next_row as usize > n {
                        return Err("buckets overrun points".into());
                    }
                    for r in b.rows() {
                        for dim in 0..dims {
                            let v = self.points.coord(r, dim);
                            if !(lo[dim] <= v && v < hi[dim]) {
                                return Err(format!("row {r} violates a plane on dim {dim}"));
                            }
                        }
                    }
                    if b.len as usize > self.bucket_size {
                        let first = self.points.row(b.start as usize);
                        if b.rows().any(|r| self.points.row(r) != first) {
                            return Err(format!("oversized leaf {i} is not degenerate"));
                        }
                    }
                }
                NodeRef::Interior(i) => {
                    let node = *self
                        .nodes
                        .get(i as usize)
                        .ok_or_else(|| format!("node {i} out of range"))?;
                    nodes_seen += 1;
                    let p = node.plane;
                    if p.dim >= dims || !p.value.is_finite() {
                        return Err(format!("node {i} has an invalid plane"));
                    }
                    let mut lhi = hi.clone();
                    let mut rlo = lo.clone();
                    lhi[p.dim] = lhi[p.dim].min(p.value);
                    rlo[p.dim] = rlo[p.dim].max(p.value);
                    stack.push((node.right, d + 1, rlo, hi));
                    stack.push((node.left, d + 1, lo, lhi));
                }
            }
            if nodes_seen > self.nodes.len() || leaves_seen > self.leaves.len() {
                return Err("cycle in tree".into());
            }
        }
        if next_row as usize != n
            || leaves_seen != self.leaves.len()
            || nodes_seen != self.nodes.len()
        {
            return Err("unreachable nodes or uncovered points".into());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let rows = self.subtree_rows(NodeRef::Interior(i as u32));
            if rows.len() as u64 != node.count {
                return Err(format!("node {i} count {} != {}", node.count, rows.len()));
            }
        }
        let mut ids = self.points.ids().to_vec();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err("duplicate ids".into());
        }
        Ok(depth)
    }
}

/// Dimensions ordered by sample variance, largest first, ties to the lower index.
fn dims_by_variance(cols: &[Vec<f64>], rows: &[u32], sample: usize, seed: u64) -> Vec<usize> {
    let picks = sample_indices(rows.len(), sample, seed);
    let m = picks.len().max(1) as f64;
    let mut var: Vec<(usize, f64)> = cols
        .iter()
        .enumerate()
        .map(|(d, col)| {
            let mean = picks.iter().map(|&i| col[rows[i] as usize]).sum::<f64>() / m;
            let ss = picks
                .iter()
                .map(|&i| {
                    let x = col[rows[i] as usize] - mean;
                    x * x
                })
                .sum::<f64>();
            (d, ss / m)
        })
        .collect();
    // stable: equal variances keep ascending dimension order
    var.sort_by(|a, b| b.1.total_cmp(&a.1));
    var.into_iter().map(|(d, _)| d).collect()
}

/// Dimension of largest variance over `min(sample, n)` sampled points.
pub fn choose_split_dimension(points: &PointSet, sample: usize, seed: u64) -> usize {
    assert!(
        !points.is_empty(),
        "cannot choose a split dimension for no points"
    );
    let rows: Vec<u32> = (0..points.len() as u32).collect();
    dims_by_variance(points.columns(), &rows, sample, seed)[0]
}

/// Stable in-place partition of `rows` by `coord[plane.dim] < plane.value`.
/// Returns the size of the left part.
pub fn partition_indices(points: &PointSet, rows: &mut [u32], plane: &SplitPlane) -> usize {
    let mut scratch = Vec::new();
    partition_column(
        points.column(plane.dim),
        rows,
        plane.value,
        false,
        &mut scratch,
    )
}

fn partition_column(
    col: &[f64],
    rows: &mut [u32],
    value: f64,
    parallel: bool,
    scratch: &mut Vec<u32>,
) -> usize {
    if parallel && rows.len() >= PAR_PARTITION_MIN {
        // rayon collects preserve iteration order, so this equals the sequential pass
        let (left, right): (Vec<u32>, Vec<u32>) =
            rows.par_iter().partition(|&&r| col[r as usize] < value);
        let mid = left.len();
        rows[..mid].copy_from_slice(&left);
        rows[mid..].copy_from_slice(&right);
        return mid;
    }
    scratch.clear();
    let mut w = 0;
    for i in 0..rows.len() {
        let r = rows[i];
        if col[r as usize] < value {
            rows[w] = r;
            w += 1;
        } else {
            scratch.push(r);
        }
    }
    rows[w..].copy_from_slice(scratch);
    w
}

/// Exact-median fallback: the upper median, or the next distinct value
/// above the minimum when the median equals it. `None` if the column is
/// constant over `rows`.
fn exact_split_value(col: &[f64], rows: &[u32]) -> Option<f64> {
    let mut vals: Vec<f64> = rows.iter().map(|&r| col[r as usize]).collect();
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let mid = vals.len() / 2;
    let (_, med, _) = vals.select_nth_unstable_by(mid, f64::total_cmp);
    let med = *med;
    if med > min {
        return Some(med);
    }
    vals.iter()
        .copied()
        .filter(|&v| v > min)
        .min_by(f64::total_cmp)
}

/// Chooses a plane for `rows` and partitions them. `None` means every
/// point is identical and the node must become a leaf.
fn split_node(
    cols: &[Vec<f64>],
    rows: &mut [u32],
    node_seed: u64,
    cfg: &BuildConfig,
    parallel: bool,
    scratch: &mut Vec<u32>,
) -> Option<(SplitPlane, usize)> {
    let n = rows.len();
    let order = dims_by_variance(cols, rows, cfg.variance_sample, seed::derive(node_seed, 1));
    for dim in order {
        let col = &cols[dim];
        let sample: Vec<f64> = sample_indices(n, cfg.local_sample_m, seed::derive(node_seed, 2))
            .into_iter()
            .map(|i| col[rows[i] as usize])
            .collect();
        let iv = build_intervals_with_stride(&sample, cfg.stride);
        let rows_ro: &[u32] = rows;
        let h = median::histogram_by(n, |i| col[rows_ro[i] as usize], &iv, parallel);
        let (b, below) = median_boundary(&iv, &h).expect("non-empty node");
        let value = if below == 0 || below as usize == n {
            match exact_split_value(col, rows) {
                Some(v) => v,
                None => continue,
            }
        } else {
            iv.boundaries()[b]
        };
        let mid = partition_column(col, rows, value, parallel, scratch);
        debug_assert!(mid > 0 && mid < n);
        return Some((SplitPlane::new(dim, value), mid));
    }
    None
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Unset,
    Node(u32),
    Leaf { start: u32, len: u32 },
    Sub(u32),
}

#[derive(Debug, Clone, Copy)]
struct Draft {
    plane: SplitPlane,
    count: u64,
    left: Slot,
    right: Slot,
}

#[derive(Debug, Clone, Copy)]
enum Parent {
    Root,
    Left(u32),
    Right(u32),
}

#[derive(Debug, Clone, Copy)]
struct Task {
    start: usize,
    len: usize,
    seed: u64,
    parent: Parent,
}

fn attach(arena: &mut [Draft], root: &mut Slot, parent: Parent, slot: Slot) {
    match parent {
        Parent::Root => *root = slot,
        Parent::Left(i) => arena[i as usize].left = slot,
        Parent::Right(i) => arena[i as usize].right = slot,
    }
}

fn child_tasks(t: &Task, node: u32, mid: usize) -> [Task; 2] {
    [
        Task {
            start: t.start,
            len: mid,
            seed: seed::derive(t.seed, 3),
            parent: Parent::Left(node),
        },
        Task {
            start: t.start + mid,
            len: t.len - mid,
            seed: seed::derive(t.seed, 4),
            parent: Parent::Right(node),
        },
    ]
}

struct SubTree {
    arena: Vec<Draft>,
    root: Slot,
}

/// Depth-first build of one subtree over `rows` (which start at `offset`
/// in the full index array).
fn build_subtree(
    cols: &[Vec<f64>],
    rows: &mut [u32],
    offset: usize,
    seed: u64,
    cfg: &BuildConfig,
) -> SubTree {
    let mut arena = Vec::new();
    let mut root = Slot::Unset;
    let mut scratch = Vec::new();
    let mut stack = vec![Task {
        start: offset,
        len: rows.len(),
        seed,
        parent: Parent::Root,
    }];
    while let Some(t) = stack.pop() {
        let local = &mut rows[t.start - offset..t.start - offset + t.len];
        let split = if t.len > cfg.bucket_size {
            split_node(cols, local, t.seed, cfg, false, &mut scratch)
        } else {
            None
        };
        match split {
            None => attach(
                &mut arena,
                &mut root,
                t.parent,
                Slot::Leaf {
                    start: t.start as u32,
                    len: t.len as u32,
                },
            ),
            Some((plane, mid)) => {
                let id = arena.len() as u32;
                arena.push(Draft {
                    plane,
                    count: t.len as u64,
                    left: Slot::Unset,
                    right: Slot::Unset,
                });
                attach(&mut arena, &mut root, t.parent, Slot::Node(id));
                let [l, r] = child_tasks(&t, id, mid);
                stack.push(r);
                stack.push(l);
            }
        }
    }
    SubTree { arena, root }
}

/// Reorders `points` bucket by bucket: bucket `i` takes rows
/// `order[ranges[i]]` and lands contiguously, in bucket order.
pub fn pack_buckets(
    points: &PointSet,
    order: &[u32],
    ranges: &[Range<usize>],
) -> (PointSet, Vec<Bucket>) {
    let mut packed_order = Vec::with_capacity(order.len());
    let mut buckets = Vec::with_capacity(ranges.len());
    for r in ranges {
        buckets.push(Bucket {
            start: packed_order.len() as u64,
            len: r.len() as u64,
        });
        packed_order.extend_from_slice(&order[r.clone()]);
    }
    let coords = points
        .columns()
        .par_iter()
        .map(|col| packed_order.iter().map(|&r| col[r as usize]).collect())
        .collect();
    let ids = packed_order
        .iter()
        .map(|&r| points.ids()[r as usize])
        .collect();
    (PointSet::from_parts_unchecked(coords, ids), buckets)
}

/// Wall time of the two construction phases.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LocalBuildTimings {
    pub tree: Duration,
    pub pack: Duration,
}

/// Builds the tree on a dedicated pool of `cfg.workers` threads.
pub fn build_local_tree(points: &PointSet, cfg: &BuildConfig) -> Result<LocalTree> {
    build_local_tree_timed(points, cfg).map(|(t, _)| t)
}

pub fn build_local_tree_timed(
    points: &PointSet,
    cfg: &BuildConfig,
) -> Result<(LocalTree, LocalBuildTimings)> {
    cfg.validate()?;
    if points.is_empty() {
        return Ok((
            LocalTree::empty(points.dims(), cfg.bucket_size),
            LocalBuildTimings::default(),
        ));
    }
    if points.len() > u32::MAX as usize {
        return Err(Error::Config(
            "more than u32::MAX points on one rank".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(|| build_in_pool(points, cfg)))
}

fn build_in_pool(points: &PointSet, cfg: &BuildConfig) -> (LocalTree, LocalBuildTimings) {
    let started = Instant::now();
    let cols = points.columns();
    let n = points.len();
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut scratch = Vec::new();
    let mut top: Vec<Draft> = Vec::new();
    let mut root = Slot::Unset;

    // Breadth-first, data-parallel stage.
    let threshold = cfg.workers * cfg.branch_factor_per_worker;
    let mut frontier = vec![Task {
        start: 0,
        len: n,
        seed: cfg.seed,
        parent: Parent::Root,
    }];
    loop {
        let splittable = frontier.iter().filter(|t| t.len > cfg.bucket_size).count();
        if splittable == 0 || splittable >= threshold {
            break;
        }
        let mut next = Vec::with_capacity(frontier.len() * 2);
        for t in frontier {
            let rows = &mut order[t.start..t.start + t.len];
            let split = if t.len > cfg.bucket_size {
                split_node(cols, rows, t.seed, cfg, true, &mut scratch)
            } else {
                None
            };
            match split {
                None => {
                    let leaf = Slot::Leaf {
                        start: t.start as u32,
                        len: t.len as u32,
                    };
                    attach(&mut top, &mut root, t.parent, leaf);
                }
                Some((plane, mid)) => {
                    let id = top.len() as u32;
                    top.push(Draft {
                        plane,
                        count: t.len as u64,
                        left: Slot::Unset,
                        right: Slot::Unset,
                    });
                    attach(&mut top, &mut root, t.parent, Slot::Node(id));
                    next.extend(child_tasks(&t, id, mid));
                }
            }
        }
        frontier = next;
    }

    // Depth-first, task-parallel stage over disjoint slices of `order`.
    let mut slices = Vec::with_capacity(frontier.len());
    let mut rest: &mut [u32] = &mut order;
    let mut consumed = 0;
    for t in &frontier {
        let (_, tail) = rest.split_at_mut(t.start - consumed);
        let (mine, tail) = tail.split_at_mut(t.len);
        slices.push((*t, mine));
        rest = tail;
        consumed = t.start + t.len;
    }
    let subs: Vec<SubTree> = slices
        .into_par_iter()
        .map(|(t, rows)| build_subtree(cols, rows, t.start, t.seed, cfg))
        .collect();
    for (i, t) in frontier.iter().enumerate() {
        attach(&mut top, &mut root, t.parent, Slot::Sub(i as u32));
    }

    // Preorder layout.
    let mut nodes = Vec::new();
    let mut ranges = Vec::new();
    let mut depth = 0;
    let mut root_ref = None;
    // (arena: None = top, slot, depth, parent)
    let mut stack = vec![(None::<usize>, root, 0usize, Parent::Root)];
    while let Some((arena_id, slot, d, parent)) = stack.pop() {
        let arena = match arena_id {
            None => &top,
            Some(s) => &subs[s].arena,
        };
        let made = match slot {
            Slot::Unset => unreachable!("unattached slot"),
            Slot::Sub(s) => {
                stack.push((Some(s as usize), subs[s as usize].root, d, parent));
                continue;
            }
            Slot::Leaf { start, len } => {
                depth = depth.max(d);
                ranges.push(start as usize..(start + len) as usize);
                NodeRef::Leaf(ranges.len() as u32 - 1)
            }
            Slot::Node(i) => {
                let draft = arena[i as usize];
                let id = nodes.len() as u32;
                nodes.push(Interior {
                    plane: draft.plane,
                    left: NodeRef::Leaf(u32::MAX),
                    right: NodeRef::Leaf(u32::MAX),
                    count: draft.count,
                });
                stack.push((arena_id, draft.right, d + 1, Parent::Right(id)));
                stack.push((arena_id, draft.left, d + 1, Parent::Left(id)));
                NodeRef::Interior(id)
            }
        };
        match parent {
            Parent::Root => root_ref = Some(made),
            Parent::Left(p) => nodes[p as usize].left = made,
            Parent::Right(p) => nodes[p as usize].right = made,
        }
    }

    let tree_time = started.elapsed();
    let started = Instant::now();
    let (packed, leaves) = pack_buckets(points, &order, &ranges);
    let tree = LocalTree {
        root: root_ref,
        nodes,
        leaves,
        points: packed,
        depth,
        bucket_size: cfg.bucket_size,
    };
    let timings = LocalBuildTimings {
        tree: tree_time,
        pack: started.elapsed(),
    };
    (tree, timings)
}
