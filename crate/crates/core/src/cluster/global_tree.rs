use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::geometry::{min_sq_dist_to_region, Region, SplitPlane};

/// The replicated top of the two-tier tree: a complete binary tree of
/// `log2(P)` levels whose leaf `i` is rank `i`.
///
/// Nodes are numbered heap-style from 1; node `i` has children `2i` and
/// `2i + 1`, and leaves are nodes `P..2P`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalTree {
    ranks: usize,
    dims: usize,
    planes: Vec<SplitPlane>,
    /// Region of node `i` at index `i - 1`.
    regions: Vec<Region>,
}

impl GlobalTree {
    /// `planes[i - 1]` splits node `i`; there are `ranks - 1` of them.
    pub fn new(ranks: usize, dims: usize, planes: Vec<SplitPlane>) -> Result<Self> {
        if !ranks.is_power_of_two() {
            return Err(Error::RankCount(ranks));
        }
        if dims == 0 {
            return Err(Error::ZeroDims);
        }
        if planes.len() != ranks - 1 {
            return Err(Error::Format(format!(
                "{} planes for {ranks} ranks, expected {}",
                planes.len(),
                ranks - 1
            )));
        }
        if let Some(p) = planes
            .iter()
            .find(|p| p.dim >= dims || !p.value.is_finite())
        {
            return Err(Error::Format(format!(
                "invalid plane {p:?} in {dims} dimensions"
            )));
        }
        let mut regions = vec![Region::unbounded(dims); 2 * ranks - 1];
        for i in 1..ranks {
            let p = planes[i - 1];
            let (lo, hi) = regions[i - 1].split(p.dim, p.value);
            regions[2 * i - 1] = lo;
            regions[2 * i] = hi;
        }
        Ok(Self {
            ranks,
            dims,
            planes,
            regions,
        })
    }

    pub fn single(dims: usize) -> Self {
        Self::new(1, dims, Vec::new()).expect("one rank is always valid")
    }

    pub fn ranks(&self) -> usize {
        self.ranks
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn levels(&self) -> usize {
        self.ranks.trailing_zeros() as usize
    }

    pub fn planes(&self) -> &[SplitPlane] {
        &self.planes
    }

    pub fn region(&self, rank: usize) -> &Region {
        &self.regions[self.ranks + rank - 1]
    }

    /// Planes from the root down to `rank`'s leaf.
    pub fn path(&self, rank: usize) -> Vec<SplitPlane> {
        let mut out = Vec::with_capacity(self.levels());
        let mut i = self.ranks + rank;
        while i > 1 {
            i /= 2;
            out.push(self.planes[i - 1]);
        }
        out.reverse();
        out
    }

    /// Rank whose region contains `q`; values equal to a plane go right.
    pub fn owner_of(&self, q: &[f64]) -> usize {
        let mut i = 1;
        while i < self.ranks {
            let p = &self.planes[i - 1];
            i = 2 * i + usize::from(!p.goes_left(q));
        }
        i - self.ranks
    }

    /// Ranks other than the owner whose region lies closer than `sq_radius`.
    /// Ascending.
    pub fn ranks_within(&self, q: &[f64], sq_radius: f64) -> Vec<usize> {
        let owner = self.owner_of(q);
        let mut out = Vec::new();
        let mut stack = vec![1usize];
        while let Some(i) = stack.pop() {
            if min_sq_dist_to_region(q, &self.regions[i - 1]) >= sq_radius {
                continue;
            }
            if i >= self.ranks {
                let r = i - self.ranks;
                if r != owner {
                    out.push(r);
                }
            } else {
                stack.push(2 * i + 1);
                stack.push(2 * i);
            }
        }
        out
    }

    /// `u32 ranks, u32 dims, then (u32 dim, f64 value)` per plane.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let gt = Self::read(&mut r)?;
        r.expect_end()?;
        Ok(gt)
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.u32(self.ranks as u32);
        w.u32(self.dims as u32);
        for p in &self.planes {
            w.u32(p.dim as u32);
            w.f64(p.value);
        }
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let ranks = r.u32()? as usize;
        let dims = r.u32()? as usize;
        if ranks == 0 || ranks > 1 << 24 {
            return Err(Error::Format(format!("implausible rank count {ranks}")));
        }
        let planes = (1..ranks)
            .map(|_| {
                let dim = r.u32()? as usize;
                let value = r.f64()?;
                Ok(SplitPlane { dim, value })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(ranks, dims, planes).map_err(|e| Error::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn random_tree(ranks: usize, dims: usize, s: u64) -> GlobalTree {
        let mut rng = seed::rng(s);
        let planes = (1..ranks)
            .map(|_| SplitPlane::new(rng.random_range(0..dims), rng.random_range(-1.0..1.0)))
            .collect();
        GlobalTree::new(ranks, dims, planes).unwrap()
    }

    #[test]
    fn single_rank_owns_everything() {
        let gt = GlobalTree::single(3);
        assert_eq!(gt.owner_of(&[1e9, -4.0, 0.0]), 0);
        assert!(gt.ranks_within(&[0.0; 3], f64::INFINITY).is_empty());
        assert_eq!(gt.levels(), 0);
    }

    #[test]
    fn ties_go_to_the_upper_rank() {
        let gt = GlobalTree::new(2, 2, vec![SplitPlane::new(0, 5.0)]).unwrap();
        assert_eq!(gt.owner_of(&[5.0, 0.0]), 1);
        assert_eq!(gt.owner_of(&[4.999, 0.0]), 0);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert_eq!(GlobalTree::new(3, 1, vec![]), Err(Error::RankCount(3)));
        assert!(GlobalTree::new(2, 1, vec![]).is_err());
        assert!(GlobalTree::new(2, 1, vec![SplitPlane { dim: 1, value: 0.0 }]).is_err());
    }

    #[test]
    fn owner_region_contains_query() {
        for ranks in [1, 2, 4, 8, 16, 32] {
            let gt = random_tree(ranks, 3, ranks as u64);
            let mut rng = seed::rng(99);
            for _ in 0..2000 {
                let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
                let owner = gt.owner_of(&q);
                assert!(gt.region(owner).contains(&q));
                assert_eq!(min_sq_dist_to_region(&q, gt.region(owner)), 0.0);
                let inside = (0..ranks).filter(|&r| gt.region(r).contains(&q)).count();
                assert_eq!(inside, 1, "regions must tile space");
            }
        }
    }

    #[test]
    fn ranks_within_matches_all_regions_oracle() {
        for ranks in [1, 2, 4, 8, 16, 32] {
            let gt = random_tree(ranks, 2, 7 + ranks as u64);
            let mut rng = seed::rng(ranks as u64);
            for _ in 0..1000 {
                let q: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
                let r: f64 = rng.random_range(0.0..0.5);
                let owner = gt.owner_of(&q);
                let expected: Vec<usize> = (0..ranks)
                    .filter(|&x| x != owner && min_sq_dist_to_region(&q, gt.region(x)) < r)
                    .collect();
                assert_eq!(gt.ranks_within(&q, r), expected);
            }
            let q = [0.1, 0.2];
            assert!(gt.ranks_within(&q, 0.0).is_empty());
            let all = gt.ranks_within(&q, f64::INFINITY);
            let nonempty = (0..ranks)
                .filter(|&x| x != gt.owner_of(&q) && !gt.region(x).is_empty())
                .count();
            assert_eq!(all.len(), nonempty);
        }
    }

    #[test]
    fn path_lists_root_first() {
        let planes: Vec<_> = (0..7).map(|i| SplitPlane::new(0, i as f64)).collect();
        let gt = GlobalTree::new(8, 1, planes).unwrap();
        let vals: Vec<f64> = gt.path(5).iter().map(|p| p.value).collect();
        // leaf 13 -> 6 -> 3 -> 1
        assert_eq!(vals, vec![0.0, 2.0, 5.0]);
        assert!(GlobalTree::single(1).path(0).is_empty());
    }

    #[test]
    fn bytes_roundtrip() {
        let gt = random_tree(16, 4, 3);
        let bytes = gt.to_bytes();
        assert_eq!(GlobalTree::from_bytes(&bytes).unwrap(), gt);
        assert!(GlobalTree::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
