//! Little-endian byte encoding shared by the wire format and data files.

use crate::error::{Error, Result};
use crate::points::PointSet;

#[derive(Debug, Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    /// `u32 count, u32 dims, ids, column-major coords`.
    pub fn point_block(&mut self, ps: &PointSet) {
        self.u32(ps.len() as u32);
        self.u32(ps.dims() as u32);
        self.ids_and_columns(ps);
    }

    pub fn ids_and_columns(&mut self, ps: &PointSet) {
        self.buf.reserve(ps.len() * 8 * (1 + ps.dims()));
        for &id in ps.ids() {
            self.u64(id);
        }
        for col in ps.columns() {
            for &v in col {
                self.f64(v);
            }
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug)]
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Format(format!("truncated: need {n} bytes at offset {}", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.remaining()
            )));
        }
        Ok(())
    }

    pub fn point_block(&mut self) -> Result<PointSet> {
        let count = self.u32()? as usize;
        let dims = self.u32()? as usize;
        self.ids_and_columns(dims, count)
    }

    pub fn ids_and_columns(&mut self, dims: usize, count: usize) -> Result<PointSet> {
        if dims == 0 {
            return Err(Error::Format("zero dimensions".into()));
        }
        let need = count
            .checked_mul(8 * (1 + dims))
            .ok_or_else(|| Error::Format("point block size overflows".into()))?;
        if need > self.remaining() {
            return Err(Error::Format(format!(
                "point block needs {need} bytes, {} left",
                self.remaining()
            )));
        }
        let ids = (0..count).map(|_| self.u64()).collect::<Result<Vec<_>>>()?;
        let coords = (0..dims)
            .map(|_| (0..count).map(|_| self.f64()).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        PointSet::new(coords, ids).map_err(|e| Error::Format(e.to_string()))
    }
}
