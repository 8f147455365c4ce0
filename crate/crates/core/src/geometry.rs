//! Distance kernels and axis-aligned regions.

use serde::{Deserialize, Serialize};

/// Sum of squared coordinate differences, accumulated in dimension order.
///
/// Every distance in the crate (leaf scans, the oracle, region bounds) is
/// accumulated in this same order so that results compare bit-for-bit.
#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b) {
        let diff = x - y;
        sum += diff * diff;
    }
    sum
}

/// Axis-aligned split: `coord[dim] < value` goes left, everything else right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPlane {
    pub dim: usize,
    pub value: f64,
}

impl SplitPlane {
    pub fn new(dim: usize, value: f64) -> Self {
        Self { dim, value }
    }

    #[inline]
    pub fn goes_left(&self, q: &[f64]) -> bool {
        q[self.dim] < self.value
    }
}

/// Axis-aligned box `lower[d] <= x[d] < upper[d]`; faces may be infinite.
///
/// A box with `lower[d] >= upper[d]` on some axis is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Region {
    /// The whole space.
    pub fn unbounded(dims: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dims],
            upper: vec![f64::INFINITY; dims],
        }
    }

    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        Self { lower, upper }
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.iter().zip(&self.upper).any(|(lo, hi)| lo >= hi)
    }

    /// Half-open membership, matching the "equal goes right" split rule.
    pub fn contains(&self, q: &[f64]) -> bool {
        q.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&x, (&lo, &hi))| lo <= x && x < hi)
    }

    /// Splits along `dim` at `value` into the `< value` and `>= value` halves.
    pub fn split(&self, dim: usize, value: f64) -> (Region, Region) {
        let mut left = self.clone();
        let mut right = self.clone();
        left.upper[dim] = left.upper[dim].min(value);
        right.lower[dim] = right.lower[dim].max(value);
        (left, right)
    }
}

/// Squared distance from `q` to the nearest point of the closed box.
///
/// Zero when `q` is inside; `+inf` for an empty region.
pub fn min_sq_dist_to_region(q: &[f64], region: &Region) -> f64 {
    debug_assert_eq!(q.len(), region.dims());
    if region.is_empty() {
        return f64::INFINITY;
    }
    let mut sum = 0.0;
    for (&x, (&lo, &hi)) in q.iter().zip(region.lower.iter().zip(&region.upper)) {
        let diff = if x < lo {
            lo - x
        } else if x > hi {
            x - hi
        } else {
            0.0
        };
        sum += diff * diff;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn squared_distance_examples() {
        assert_eq!(squared_distance(&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(squared_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(squared_distance(&[0.0, 0.0], &[3.0, 4.0]), 25.0);
    }

    #[test]
    fn region_distance_examples() {
        let square = Region::new(vec![0.0, 0.0], vec![10.0, 10.0]);
        assert_eq!(min_sq_dist_to_region(&[5.0, 5.0], &square), 0.0);

        let half = Region::new(
            vec![0.0, f64::NEG_INFINITY],
            vec![f64::INFINITY, f64::INFINITY],
        );
        assert_eq!(min_sq_dist_to_region(&[-3.0, 0.0], &half), 9.0);

        assert_eq!(min_sq_dist_to_region(&[12.0, 13.0], &square), 13.0);
    }

    /// Grid minimisation over box points; step 0.01 hits the corner (10,10) exactly.
    #[test]
    fn region_distance_matches_grid_oracle() {
        let q = [12.0, 13.0];
        let mut best = f64::INFINITY;
        for i in 0..=1000 {
            for j in 0..=1000 {
                let p = [i as f64 * 0.01, j as f64 * 0.01];
                best = best.min(squared_distance(&q, &p));
            }
        }
        let square = Region::new(vec![0.0, 0.0], vec![10.0, 10.0]);
        assert_eq!(best, 13.0);
        assert_eq!(min_sq_dist_to_region(&q, &square), best);
    }

    #[test]
    fn empty_region_is_infinitely_far() {
        let r = Region::new(vec![1.0, 0.0], vec![1.0, 5.0]);
        assert!(r.is_empty());
        assert_eq!(min_sq_dist_to_region(&[1.0, 1.0], &r), f64::INFINITY);
    }

    #[test]
    fn split_assigns_boundary_right() {
        let r = Region::unbounded(2);
        let (l, rr) = r.split(0, 5.0);
        assert!(!l.contains(&[5.0, 0.0]));
        assert!(rr.contains(&[5.0, 0.0]));
    }

    fn point(dims: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1e3..1e3f64, dims)
    }

    proptest! {
        #[test]
        fn distance_is_symmetric(a in point(4), b in point(4)) {
            prop_assert_eq!(squared_distance(&a, &b), squared_distance(&b, &a));
            prop_assert!(squared_distance(&a, &b) >= 0.0);
        }

        #[test]
        fn region_bound_is_a_lower_bound(
            q in point(3),
            lo in point(3),
            ext in prop::collection::vec(1e-3..50.0f64, 3),
            t in prop::collection::vec(0.0..1.0f64, 3),
        ) {
            let hi: Vec<f64> = lo.iter().zip(&ext).map(|(l, e)| l + e).collect();
            let region = Region::new(lo.clone(), hi.clone());
            let p: Vec<f64> = (0..3).map(|d| lo[d] + t[d] * (hi[d] - lo[d])).collect();
            prop_assert!(min_sq_dist_to_region(&q, &region) <= squared_distance(&q, &p));
        }
    }
}
