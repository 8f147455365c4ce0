//! Global tree construction and point redistribution.
//!
//! Round `l` splits every group of `P >> l` consecutive ranks in two. Within
//! a group all ranks see the same gathered samples and reduced histograms,
//! so they agree on the plane without a coordinator.

use std::ops::Range;
use std::time::{Duration, Instant};

use super::global_tree::GlobalTree;
use super::transport::{MessageKind, Transport};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::geometry::{Region, SplitPlane};
use crate::local_tree::BuildConfig;
use crate::median::{
    self, build_intervals_with_stride, histogram_by, median_boundary, sample_indices, IntervalSet,
};
use crate::points::PointSet;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    /// Number of ranks; a power of two.
    pub ranks: usize,
    /// Samples each rank contributes per global split.
    pub global_sample_m: usize,
    pub local: BuildConfig,
    /// Split groups whose points are all identical (or absent) anyway,
    /// leaving empty ranks, instead of failing with [`Error::Unsplittable`].
    pub allow_empty_ranks: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            ranks: 1,
            global_sample_m: median::GLOBAL_SAMPLE_M,
            local: BuildConfig::default(),
            allow_empty_ranks: false,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.ranks.is_power_of_two() {
            return Err(Error::RankCount(self.ranks));
        }
        if self.global_sample_m == 0 {
            return Err(Error::Config("global_sample_m must be at least 1".into()));
        }
        self.local.validate()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GlobalBuildStats {
    /// Sampling, histograms and median agreement.
    pub split: Duration,
    pub redistribute: Duration,
    pub points_sent: u64,
    pub points_received: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RedistributeStats {
    pub sent: u64,
    pub received: u64,
}

fn group_of(rank: usize, size: usize) -> Range<usize> {
    let start = rank / size * size;
    start..start + size
}

/// What every group member learns from the first gather of a round.
struct GroupSummary {
    total: u64,
    min: Vec<f64>,
    max: Vec<f64>,
    /// Dimensions by gathered-sample variance, largest first.
    by_variance: Vec<usize>,
}

fn summarize<T: Transport>(
    t: &T,
    group: Range<usize>,
    points: &PointSet,
    m: usize,
    s: u64,
) -> Result<GroupSummary> {
    let dims = points.dims();
    let mut w = Writer::new();
    w.u64(points.len() as u64);
    for col in points.columns() {
        w.f64(col.iter().copied().fold(f64::INFINITY, f64::min));
    }
    for col in points.columns() {
        w.f64(col.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    let rows: Vec<u32> = sample_indices(points.len(), m, seed::derive(s, t.rank() as u64))
        .into_iter()
        .map(|i| i as u32)
        .collect();
    w.point_block(&points.gather(&rows));

    let mut total = 0;
    let mut min = vec![f64::INFINITY; dims];
    let mut max = vec![f64::NEG_INFINITY; dims];
    let mut sample: Vec<Vec<f64>> = vec![Vec::new(); dims];
    for part in t.all_gather(group, w.finish())? {
        let mut r = Reader::new(&part);
        total += r.u64()?;
        for v in min.iter_mut() {
            *v = v.min(r.f64()?);
        }
        for v in max.iter_mut() {
            *v = v.max(r.f64()?);
        }
        let block = r.point_block()?;
        if block.dims() != dims {
            return Err(Error::DimMismatch {
                expected: dims,
                got: block.dims(),
            });
        }
        for (d, col) in block.columns().iter().enumerate() {
            sample[d].extend_from_slice(col);
        }
    }
    Ok(GroupSummary {
        total,
        min,
        max,
        by_variance: dims_by_variance(&sample),
    })
}

fn dims_by_variance(sample: &[Vec<f64>]) -> Vec<usize> {
    let mut var: Vec<(usize, f64)> = sample
        .iter()
        .enumerate()
        .map(|(d, col)| {
            let m = col.len().max(1) as f64;
            let mean = col.iter().sum::<f64>() / m;
            (
                d,
                col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m,
            )
        })
        .collect();
    var.sort_by(|a, b| b.1.total_cmp(&a.1));
    var.into_iter().map(|(d, _)| d).collect()
}

/// Dimension of largest variance over a sample gathered from the whole
/// group; every member gets the same answer.
pub fn choose_global_split_dimension<T: Transport>(
    t: &T,
    group: Range<usize>,
    points: &PointSet,
    m: usize,
    seed: u64,
) -> Result<usize> {
    Ok(summarize(t, group, points, m, seed)?.by_variance[0])
}

/// Boundary nearest the median that leaves both sides non-empty.
fn balanced_boundary(iv: &IntervalSet, counts: &[u64], total: u64) -> Option<f64> {
    let h = median::Histogram {
        counts: counts.to_vec(),
    };
    let (b, below) = median_boundary(iv, &h).ok()?;
    if below > 0 && below < total {
        return Some(iv.boundaries()[b]);
    }
    let mut best: Option<(u64, f64)> = None;
    let mut cum = 0u64;
    for (b, &v) in iv.boundaries().iter().enumerate() {
        cum += counts[b];
        if cum > 0 && cum < total {
            let gap = (2 * cum).abs_diff(total);
            if best.is_none_or(|(g, _)| gap < g) {
                best = Some((gap, v));
            }
        }
    }
    best.map(|(_, v)| v)
}

/// Agrees on the plane for the caller's group in this round.
fn split_group<T: Transport>(
    t: &T,
    group: Range<usize>,
    points: &PointSet,
    region: &Region,
    cfg: &ClusterConfig,
    round_seed: u64,
) -> Result<SplitPlane> {
    let m = cfg.global_sample_m;
    let summary = summarize(t, group.clone(), points, m, seed::derive(round_seed, 1))?;
    if summary.total == 0 {
        if !cfg.allow_empty_ranks {
            return Err(Error::EmptyDataset);
        }
        let (lo, hi) = (region.lower[0], region.upper[0]);
        let v = if lo.is_finite() {
            lo
        } else if hi.is_finite() {
            hi
        } else {
            0.0
        };
        return Ok(SplitPlane::new(0, v));
    }
    let Some(dim) = summary
        .by_variance
        .iter()
        .copied()
        .find(|&d| summary.min[d] < summary.max[d])
    else {
        if cfg.allow_empty_ranks {
            return Ok(SplitPlane::new(0, summary.min[0]));
        }
        return Err(Error::Unsplittable {
            lo: group.start,
            hi: group.end,
            count: summary.total,
            point: summary.min,
        });
    };

    let col = points.column(dim);
    let mine = median::sample_values(
        col,
        m,
        seed::derive(seed::derive(round_seed, 2), t.rank() as u64),
    );
    let mut w = Writer::new();
    for v in &mine {
        w.f64(*v);
    }
    let mut boundaries = Vec::new();
    for part in t.all_gather(group.clone(), w.finish())? {
        let mut r = Reader::new(&part);
        while r.remaining() > 0 {
            boundaries.push(r.f64()?);
        }
    }
    let iv = build_intervals_with_stride(&boundaries, cfg.local.stride);
    let local = histogram_by(col.len(), |i| col[i], &iv, true);
    let counts = t.sum_reduce(group.clone(), &local.counts)?;
    if let Some(v) = balanced_boundary(&iv, &counts, summary.total) {
        return Ok(SplitPlane::new(dim, v));
    }

    // Every sampled boundary sits at or outside the data's extremes:
    // split just above the smallest value instead.
    let gmin = summary.min[dim];
    let above = col
        .iter()
        .copied()
        .filter(|&v| v > gmin)
        .fold(f64::INFINITY, f64::min);
    let mut w = Writer::new();
    w.f64(above);
    let mut v = f64::INFINITY;
    for part in t.all_gather(group, w.finish())? {
        v = v.min(Reader::new(&part).f64()?);
    }
    Ok(SplitPlane::new(dim, v))
}

/// Who keeps what in one half of a group, and who sends surplus where.
#[derive(Debug, PartialEq, Eq)]
struct HalfPlan {
    keep: Vec<u64>,
    /// `(from, to, count)` as group-relative indices.
    transfers: Vec<(usize, usize, u64)>,
}

/// Target `N / h` per receiver (the first `N % h` get one more); each
/// receiver keeps what it can of its own points and surplus is poured into
/// the remaining gaps in rank order.
fn plan_half(amounts: &[u64], receivers: Range<usize>) -> HalfPlan {
    let total: u64 = amounts.iter().sum();
    let h = receivers.len() as u64;
    let target = |r: usize| total / h + u64::from(((r - receivers.start) as u64) < total % h);
    let keep: Vec<u64> = amounts
        .iter()
        .enumerate()
        .map(|(s, &a)| {
            if receivers.contains(&s) {
                a.min(target(s))
            } else {
                0
            }
        })
        .collect();
    let mut surplus: Vec<(usize, u64)> = amounts
        .iter()
        .zip(&keep)
        .enumerate()
        .filter(|(_, (a, k))| a > k)
        .map(|(s, (a, k))| (s, a - k))
        .collect();
    let mut gaps: Vec<(usize, u64)> = receivers
        .clone()
        .map(|r| (r, target(r) - keep[r]))
        .filter(|&(_, g)| g > 0)
        .collect();
    let mut transfers = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < surplus.len() && j < gaps.len() {
        let n = surplus[i].1.min(gaps[j].1);
        transfers.push((surplus[i].0, gaps[j].0, n));
        surplus[i].1 -= n;
        gaps[j].1 -= n;
        if surplus[i].1 == 0 {
            i += 1;
        }
        if gaps[j].1 == 0 {
            j += 1;
        }
    }
    HalfPlan { keep, transfers }
}

/// Moves points below `plane` to the lower half of `group` and the rest to
/// the upper half, balancing counts within each half.
pub fn redistribute<T: Transport>(
    t: &T,
    group: Range<usize>,
    plane: &SplitPlane,
    points: PointSet,
) -> Result<(PointSet, RedistributeStats)> {
    let size = group.len();
    let half = size / 2;
    let me = t.rank() - group.start;
    let col = points.column(plane.dim);
    let (lower, upper): (Vec<u32>, Vec<u32>) =
        (0..points.len() as u32).partition(|&i| col[i as usize] < plane.value);

    let mut w = Writer::new();
    w.u64(lower.len() as u64);
    w.u64(upper.len() as u64);
    let mut a_lo = Vec::with_capacity(size);
    let mut a_hi = Vec::with_capacity(size);
    for part in t.all_gather(group.clone(), w.finish())? {
        let mut r = Reader::new(&part);
        a_lo.push(r.u64()?);
        a_hi.push(r.u64()?);
    }
    let lo_plan = plan_half(&a_lo, 0..half);
    let hi_plan = plan_half(&a_hi, half..size);

    let mut outgoing = vec![Vec::new(); size];
    let mut sent = 0;
    for (rows, plan) in [(&lower, &lo_plan), (&upper, &hi_plan)] {
        let mut next = plan.keep[me] as usize;
        for &(from, to, n) in &plan.transfers {
            if from == me {
                let chunk = &rows[next..next + n as usize];
                next += n as usize;
                let mut w = Writer::new();
                w.point_block(&points.gather(chunk));
                outgoing[to] = w.finish();
                sent += n;
            }
        }
        debug_assert_eq!(next, rows.len());
    }
    let incoming = t.all_to_all(group, MessageKind::Points, outgoing)?;

    let (rows, plan) = if me < half {
        (&lower, &lo_plan)
    } else {
        (&upper, &hi_plan)
    };
    let mut result = points.gather(&rows[..plan.keep[me] as usize]);
    let mut received = 0;
    for payload in incoming.iter().filter(|p| !p.is_empty()) {
        let mut r = Reader::new(payload);
        let block = r.point_block()?;
        r.expect_end()?;
        if block.dims() != points.dims() {
            return Err(Error::DimMismatch {
                expected: points.dims(),
                got: block.dims(),
            });
        }
        received += block.len() as u64;
        result.append(&block);
    }
    let expected: u64 = plan
        .transfers
        .iter()
        .filter(|x| x.1 == me)
        .map(|x| x.2)
        .sum();
    if received != expected {
        return Err(Error::Transport(format!(
            "rank {} expected {expected} points, got {received}",
            t.rank()
        )));
    }
    Ok((result, RedistributeStats { sent, received }))
}

/// Runs every round of global construction for the calling rank. Returns
/// the replicated tree and the rank's points, all inside its region.
pub fn build_global_tree<T: Transport>(
    t: &T,
    points: PointSet,
    cfg: &ClusterConfig,
) -> Result<(GlobalTree, PointSet, GlobalBuildStats)> {
    cfg.validate()?;
    let ranks = t.rank_count();
    if ranks != cfg.ranks {
        return Err(Error::Config(format!(
            "transport has {ranks} ranks, configuration says {}",
            cfg.ranks
        )));
    }
    let dims = points.dims();
    let mut stats = GlobalBuildStats::default();
    if ranks == 1 {
        if points.is_empty() {
            return Err(Error::EmptyDataset);
        }
        return Ok((GlobalTree::single(dims), points, stats));
    }

    let levels = ranks.trailing_zeros() as usize;
    let base = seed::derive(cfg.local.seed, 0x676c_6f62);
    let mut points = points;
    let mut region = Region::unbounded(dims);
    let mut path = Vec::with_capacity(levels);
    for level in 0..levels {
        let group = group_of(t.rank(), ranks >> level);
        let round_seed = seed::derive(seed::derive(base, level as u64), group.start as u64);

        let started = Instant::now();
        let plane = split_group(t, group.clone(), &points, &region, cfg, round_seed)?;
        stats.split += started.elapsed();

        let started = Instant::now();
        let (moved, rs) = redistribute(t, group.clone(), &plane, points)?;
        stats.redistribute += started.elapsed();
        stats.points_sent += rs.sent;
        stats.points_received += rs.received;
        points = moved;

        let (lo, hi) = region.split(plane.dim, plane.value);
        region = if t.rank() < group.start + group.len() / 2 {
            lo
        } else {
            hi
        };
        path.push(plane);
    }

    let started = Instant::now();
    let mut w = Writer::new();
    for p in &path {
        w.u32(p.dim as u32);
        w.f64(p.value);
    }
    let mut planes: Vec<Option<SplitPlane>> = vec![None; ranks - 1];
    for (rank, part) in t.all_gather(0..ranks, w.finish())?.into_iter().enumerate() {
        let mut r = Reader::new(&part);
        for level in 0..levels {
            let p = SplitPlane {
                dim: r.u32()? as usize,
                value: r.f64()?,
            };
            let node = (ranks + rank) >> (levels - level);
            match planes[node - 1] {
                None => planes[node - 1] = Some(p),
                Some(q) if q == p => {}
                Some(q) => {
                    return Err(Error::Transport(format!(
                        "ranks disagree on node {node}: {q:?} vs {p:?}"
                    )))
                }
            }
        }
    }
    let planes = planes
        .into_iter()
        .map(|p| p.expect("every node is on some path"))
        .collect();
    let gt = GlobalTree::new(ranks, dims, planes)?;
    stats.split += started.elapsed();
    debug_assert_eq!(gt.region(t.rank()), &region);
    Ok((gt, points, stats))
}
