//! Approximate medians from sampled, non-uniform histograms.
//!
//! A sample of the values supplies the bin boundaries; every value is then
//! binned and the boundary whose cumulative count is closest to half the
//! total becomes the split value. Bin location avoids binary search: a
//! coarse array holding every `stride`-th boundary is scanned first, then
//! the one `stride`-wide block it points at. Both scans are branch-free
//! counts over contiguous memory.

use rand::seq::index;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed;

/// Per-rank sample size for the global tree splits.
pub const GLOBAL_SAMPLE_M: usize = 256;
/// Sample size for splits inside a local tree.
pub const LOCAL_SAMPLE_M: usize = 1024;
pub const DEFAULT_STRIDE: usize = 32;

/// Below this many values histograms are filled on the calling thread.
const PAR_HISTOGRAM_MIN: usize = 1 << 14;

/// Indices of `min(m, len)` distinct positions, chosen uniformly.
pub fn sample_indices(len: usize, m: usize, seed: u64) -> Vec<usize> {
    if m >= len {
        return (0..len).collect();
    }
    let mut rng = seed::rng(seed);
    index::sample(&mut rng, len, m).into_vec()
}

/// Draws `min(m, values.len())` values without replacement.
pub fn sample_values(values: &[f64], m: usize, seed: u64) -> Vec<f64> {
    assert!(m >= 1, "sample size must be positive");
    sample_indices(values.len(), m, seed)
        .into_iter()
        .map(|i| values[i])
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSet {
    boundaries: Vec<f64>,
    stride_index: Vec<f64>,
    stride: usize,
}

impl IntervalSet {
    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn stride_index(&self) -> &[f64] {
        &self.stride_index
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.boundaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boundaries.is_empty()
    }

    /// Number of histogram bins, one more than the boundary count.
    pub fn bins(&self) -> usize {
        self.boundaries.len() + 1
    }

    /// Bin `b` holds `boundaries[b-1] <= v < boundaries[b]`, so the bin
    /// index is the number of boundaries `<= v`.
    #[inline]
    pub fn locate_bin(&self, v: f64) -> usize {
        let block = count_le(&self.stride_index, v);
        if block == 0 {
            return 0;
        }
        let start = (block - 1) * self.stride;
        let end = (start + self.stride).min(self.boundaries.len());
        start + count_le(&self.boundaries[start..end], v)
    }
}

#[inline]
fn count_le(sorted: &[f64], v: f64) -> usize {
    sorted.iter().map(|&b| (b <= v) as usize).sum()
}

pub fn build_intervals(samples: &[f64]) -> IntervalSet {
    build_intervals_with_stride(samples, DEFAULT_STRIDE)
}

/// Sorts and deduplicates `samples` into bin boundaries.
pub fn build_intervals_with_stride(samples: &[f64], stride: usize) -> IntervalSet {
    assert!(stride >= 1, "stride must be positive");
    let mut boundaries = samples.to_vec();
    boundaries.sort_by(f64::total_cmp);
    boundaries.dedup();
    let stride_index = boundaries.iter().step_by(stride).copied().collect();
    IntervalSet {
        boundaries,
        stride_index,
        stride,
    }
}

pub fn locate_bin(intervals: &IntervalSet, v: f64) -> usize {
    intervals.locate_bin(v)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn zeros(bins: usize) -> Self {
        Self {
            counts: vec![0; bins],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Elementwise sum; used to merge per-worker and per-rank partials.
    pub fn merge(&mut self, other: &Histogram) {
        assert_eq!(self.counts.len(), other.counts.len());
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

pub fn histogram_values(values: &[f64], intervals: &IntervalSet) -> Histogram {
    histogram_by(values.len(), |i| values[i], intervals, true)
}

/// Bins `value(i)` for `i in 0..len`. With `parallel`, disjoint slices are
/// counted on the current rayon pool and the partials summed, so the
/// result never depends on the worker count.
pub fn histogram_by<F>(len: usize, value: F, intervals: &IntervalSet, parallel: bool) -> Histogram
where
    F: Fn(usize) -> f64 + Sync,
{
    let bins = intervals.bins();
    if !parallel || len < PAR_HISTOGRAM_MIN {
        let mut h = Histogram::zeros(bins);
        for i in 0..len {
            h.counts[intervals.locate_bin(value(i))] += 1;
        }
        return h;
    }
    (0..len)
        .into_par_iter()
        .with_min_len(PAR_HISTOGRAM_MIN / 4)
        .fold(
            || Histogram::zeros(bins),
            |mut h, i| {
                h.counts[intervals.locate_bin(value(i))] += 1;
                h
            },
        )
        .reduce(
            || Histogram::zeros(bins),
            |mut a, b| {
                a.merge(&b);
                a
            },
        )
}

/// Index of the boundary whose cumulative fraction is closest to 0.5,
/// ties to the lower boundary, together with the count of values below it.
pub fn median_boundary(intervals: &IntervalSet, h: &Histogram) -> Result<(usize, u64)> {
    let total = h.total();
    if total == 0 || intervals.is_empty() {
        return Err(Error::DegenerateSplit);
    }
    debug_assert_eq!(h.counts.len(), intervals.bins());
    // |cum/total - 1/2| compared exactly as |2*cum - total|.
    let mut best = (0usize, u64::MAX, 0u64);
    let mut cum = 0u64;
    for b in 0..intervals.len() {
        cum += h.counts[b];
        let gap = (2 * cum).abs_diff(total);
        if gap < best.1 {
            best = (b, gap, cum);
        }
    }
    Ok((best.0, best.2))
}

pub fn approximate_median(intervals: &IntervalSet, h: &Histogram) -> Result<f64> {
    let (b, _) = median_boundary(intervals, h)?;
    Ok(intervals.boundaries[b])
}
