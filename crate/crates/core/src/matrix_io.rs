//! Little-endian binary matrix files.
//!
//! Layout: magic bytes, `rows: u64`, `cols: u64`, then `rows * cols` values
//! in row-major order. Rows that are entirely NaN encode an absent vector.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Magic for card-feature and query-feature sidecars.
pub const FEATURE_MAGIC: &[u8] = b"CMRREG1";

/// Writes optional `f32` rows of width `cols`. Absent rows are stored as NaN.
pub fn write_f32_rows(path: &Path, magic: &[u8], cols: usize, rows: &[Option<&[f32]>]) -> Result<()> {
    let mut buf = Vec::with_capacity(magic.len() + 16 + rows.len() * cols * 4);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(cols as u64).to_le_bytes());
    for row in rows {
        match row {
            Some(values) => {
                if values.len() != cols {
                    return Err(Error::DimensionMismatch {
                        expected: cols,
                        got: values.len(),
                    });
                }
                for v in *values {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => {
                for _ in 0..cols {
                    buf.extend_from_slice(&f32::NAN.to_le_bytes());
                }
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads rows written by [`write_f32_rows`], returning the width and rows.
pub fn read_f32_rows(path: &Path, magic: &[u8]) -> Result<(usize, Vec<Option<Vec<f32>>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = Cursor::new(&bytes, path);
    cursor.expect_magic(magic)?;
    let rows = cursor.u64()? as usize;
    let cols = cursor.u64()? as usize;
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut row = Vec::with_capacity(cols);
        for _ in 0..cols {
            row.push(f32::from_le_bytes(cursor.take::<4>()?));
        }
        let nan = row.iter().filter(|v| v.is_nan()).count();
        if nan == cols && cols > 0 {
            out.push(None);
        } else if nan > 0 {
            return Err(Error::format(path, format!("row {r} is partially NaN")));
        } else {
            out.push(Some(row));
        }
    }
    cursor.finish()?;
    Ok((cols, out))
}

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Cursor { bytes, pos: 0, path }
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let end = self.pos + magic.len();
        if self.bytes.len() < end || &self.bytes[self.pos..end] != magic {
            return Err(Error::format(
                self.path,
                format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
            ));
        }
        self.pos = end;
        Ok(())
    }

    pub(crate) fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        if self.bytes.len() < end {
            return Err(Error::format(self.path, "unexpected end of file"));
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..end]);
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take::<8>()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take::<8>()?))
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}
