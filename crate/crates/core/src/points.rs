//! Columnar point storage.

use std::collections::HashSet;

use crate::error::{Error, Result};

/// `count` points in `dims` dimensions, stored one column per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    dims: usize,
    coords: Vec<Vec<f64>>,
    ids: Vec<u64>,
}

impl PointSet {
    /// Validates and wraps columns. Rejects non-finite values and duplicate ids.
    pub fn new(coords: Vec<Vec<f64>>, ids: Vec<u64>) -> Result<Self> {
        let dims = coords.len();
        if dims == 0 {
            return Err(Error::ZeroDims);
        }
        let count = ids.len();
        for (dim, col) in coords.iter().enumerate() {
            if col.len() != count {
                return Err(Error::ColumnLength {
                    dim,
                    got: col.len(),
                    expected: count,
                });
            }
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row, dim });
            }
        }
        let mut seen = HashSet::with_capacity(count);
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id));
            }
        }
        Ok(Self { dims, coords, ids })
    }

    /// Builds from row-major points; ids are `0..rows.len()`.
    pub fn from_rows(dims: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let ids = (0..rows.len() as u64).collect();
        Self::from_rows_with_ids(dims, rows, ids)
    }

    pub fn from_rows_with_ids(dims: usize, rows: &[Vec<f64>], ids: Vec<u64>) -> Result<Self> {
        let mut coords = vec![Vec::with_capacity(rows.len()); dims];
        for row in rows {
            if row.len() != dims {
                return Err(Error::DimMismatch {
                    expected: dims,
                    got: row.len(),
                });
            }
            for (col, &v) in coords.iter_mut().zip(row) {
                col.push(v);
            }
        }
        if dims == 0 {
            return Err(Error::ZeroDims);
        }
        Self::new(coords, ids)
    }

    /// An empty set of the given dimensionality.
    pub fn empty(dims: usize) -> Self {
        assert!(dims > 0, "dims must be positive");
        Self {
            dims,
            coords: vec![Vec::new(); dims],
            ids: Vec::new(),
        }
    }

    /// Skips validation; callers guarantee the invariants (used when
    /// reordering or concatenating sets that were already validated).
    pub(crate) fn from_parts_unchecked(coords: Vec<Vec<f64>>, ids: Vec<u64>) -> Self {
        debug_assert!(!coords.is_empty());
        debug_assert!(coords.iter().all(|c| c.len() == ids.len()));
        Self {
            dims: coords.len(),
            coords,
            ids,
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn column(&self, dim: usize) -> &[f64] {
        &self.coords[dim]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.coords
    }

    pub fn coord(&self, row: usize, dim: usize) -> f64 {
        self.coords[dim][row]
    }

    /// Copies row `row` into `out`.
    pub fn row_into(&self, row: usize, out: &mut [f64]) {
        for (o, col) in out.iter_mut().zip(&self.coords) {
            *o = col[row];
        }
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        self.coords.iter().map(|c| c[row]).collect()
    }

    /// New set holding the rows at `rows`, in that order.
    pub fn gather(&self, rows: &[u32]) -> PointSet {
        let coords = self
            .coords
            .iter()
            .map(|col| rows.iter().map(|&r| col[r as usize]).collect())
            .collect();
        let ids = rows.iter().map(|&r| self.ids[r as usize]).collect();
        Self::from_parts_unchecked(coords, ids)
    }

    /// Appends `other`'s rows. Id uniqueness across the two is not rechecked.
    pub(crate) fn append(&mut self, other: &PointSet) {
        debug_assert_eq!(self.dims, other.dims);
        for (dst, src) in self.coords.iter_mut().zip(&other.coords) {
            dst.extend_from_slice(src);
        }
        self.ids.extend_from_slice(&other.ids);
    }

    /// `(id, coordinate bits)` per row, sorted; two sets hold the same
    /// multiset of points iff these agree.
    pub fn canonical_rows(&self) -> Vec<(u64, Vec<u64>)> {
        let mut rows: Vec<_> = (0..self.len())
            .map(|r| {
                (
                    self.ids[r],
                    self.coords.iter().map(|c| c[r].to_bits()).collect(),
                )
            })
            .collect();
        rows.sort();
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_input() {
        assert_eq!(PointSet::new(vec![], vec![]), Err(Error::ZeroDims));
        assert!(matches!(
            PointSet::new(vec![vec![1.0], vec![]], vec![0]),
            Err(Error::ColumnLength { dim: 1, .. })
        ));
        assert_eq!(
            PointSet::new(vec![vec![1.0, f64::NAN]], vec![0, 1]),
            Err(Error::NonFinite { row: 1, dim: 0 })
        );
        assert_eq!(
            PointSet::new(vec![vec![1.0, 2.0]], vec![7, 7]),
            Err(Error::DuplicateId(7))
        );
    }

    #[test]
    fn rows_and_columns_agree() {
        let ps = PointSet::from_rows(2, &[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(ps.column(1), &[2.0, 4.0]);
        assert_eq!(ps.row(1), vec![3.0, 4.0]);
        let g = ps.gather(&[1, 0]);
        assert_eq!(g.ids(), &[1, 0]);
        assert_eq!(g.canonical_rows(), ps.canonical_rows());
    }
}
