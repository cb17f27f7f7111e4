//! Little-endian byte encoding shared by every on-disk format, plus atomic
//! file replacement.

use std::fs;
use std::io::Write;
use std::path::Path;

use faer::Mat;

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            buf: Vec::with_capacity(n),
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Fixed-width, zero-padded field. Caller guarantees `s.len() <= width`.
    pub fn padded(&mut self, s: &str, width: usize) {
        debug_assert!(s.len() <= width);
        self.bytes(s.as_bytes());
        self.buf.resize(self.buf.len() + (width - s.len()), 0);
    }

    /// Row count, column count, then row-major f64 values.
    pub fn matrix(&mut self, m: &Mat<f64>) {
        self.u64(m.nrows() as u64);
        self.u64(m.ncols() as u64);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }

    pub fn f64_slice(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

/// Bounds-checked cursor; every read past the end is an error, never a panic.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::PayloadLength {
                expected: (self.pos as u64).saturating_add(n as u64),
                found: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// A u64 converted to `usize` with an upper bound, so hostile headers
    /// cannot request absurd allocations.
    pub fn count(&mut self, what: &str, max: u64) -> Result<usize> {
        let v = self.u64()?;
        if v > max {
            return Err(Error::Format(format!("{what} = {v} exceeds limit {max}")));
        }
        Ok(v as usize)
    }

    pub fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format(format!("invalid boolean byte {b}"))),
        }
    }

    pub fn padded(&mut self, width: usize) -> Result<String> {
        let raw = self.take(width)?;
        let end = raw.iter().position(|&b| b == 0).unwrap_or(width);
        if raw[end..].iter().any(|&b| b != 0) {
            return Err(Error::Format("identifier field has bytes after NUL padding".into()));
        }
        String::from_utf8(raw[..end].to_vec())
            .map_err(|_| Error::Format("identifier is not valid UTF-8".into()))
    }

    pub fn matrix(&mut self) -> Result<Mat<f64>> {
        let rows = self.count("rows", self.remaining() as u64)?;
        let cols = self.count("cols", self.remaining() as u64)?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format("matrix dims overflow".into()))?;
        let raw = self.take(n)?;
        let mut m = Mat::zeros(rows, cols);
        for (idx, c) in raw.chunks_exact(8).enumerate() {
            m[(idx / cols, idx % cols)] = f64::from_le_bytes(c.try_into().unwrap());
        }
        Ok(m)
    }

    pub fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let n = self.count("vector length", self.remaining() as u64 / 8)?;
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::PayloadLength {
                expected: self.pos as u64,
                found: self.buf.len() as u64,
            });
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to a temporary sibling and renames it over `path`, so a
/// failed write never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub(crate) fn check_finite(m: &Mat<f64>) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reader_rejects_overrun() {
        let mut r = ByteReader::new(&[1, 2, 3]);
        assert!(r.u64().is_err());
        assert_eq!(r.remaining(), 3);
    }

    #[test]
    fn padded_field_round_trip() {
        let mut w = ByteWriter::new();
        w.padded("ep01", 16);
        let bytes = w.into_inner();
        assert_eq!(bytes.len(), 16);
        assert_eq!(ByteReader::new(&bytes).padded(16).unwrap(), "ep01");
    }

    #[test]
    fn padded_field_rejects_interior_garbage() {
        let mut raw = [0u8; 8];
        raw[0] = b'a';
        raw[5] = b'x';
        assert!(ByteReader::new(&raw).padded(8).is_err());
    }

    #[test]
    fn matrix_round_trip() {
        let m = Mat::from_fn(3, 2, |i, j| (i * 10 + j) as f64 + 0.25);
        let mut w = ByteWriter::new();
        w.matrix(&m);
        let bytes = w.into_inner();
        let back = ByteReader::new(&bytes).matrix().unwrap();
        assert_eq!(back, m);
    }
}
