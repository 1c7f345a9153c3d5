// SPDX-License-Identifier: MIT OR Apache-2.0

//! Little-endian framing helpers shared by the binary file formats.
//!
//! Every format is `header | body | crc32(header)`. The trailing checksum
//! makes any single-byte header mutation detectable even when the mutated
//! field does not change the file length.

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct ByteWriter {
    buf: Vec<u8>,
    header_end: Option<usize>,
}

impl ByteWriter {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            buf: Vec::with_capacity(n),
            header_end: None,
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.f32(*v);
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    /// Marks the end of the header; everything written so far is covered by
    /// the trailing checksum.
    pub fn end_header(&mut self) {
        self.header_end = Some(self.buf.len());
    }

    pub fn finish(mut self) -> Vec<u8> {
        let end = self.header_end.expect("end_header not called");
        let crc = crc32fast::hash(&self.buf[..end]);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated {}: expected at least {} bytes, found {}",
                    self.what,
                    self.pos + n,
                    self.buf.len()
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.overflow())?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn overflow(&self) -> Error {
        Error::format(self.pos as u64, format!("{} size overflows", self.what))
    }

    /// Checks magic bytes and version.
    pub fn preamble(&mut self, magic: &[u8; 8], version: u32) -> Result<()> {
        let m = self.take(8)?;
        if m != magic {
            return Err(Error::format(
                0,
                format!("bad {} magic {:?}", self.what, String::from_utf8_lossy(m)),
            ));
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::format(
                8,
                format!("unsupported {} version {v} (expected {version})", self.what),
            ));
        }
        Ok(())
    }

    /// Validates that exactly `body` bytes plus the 4-byte checksum remain,
    /// and that the checksum matches the header read so far.
    pub fn expect_body_and_trailer(&self, body: u64) -> Result<()> {
        let header_end = self.pos as u64;
        let expected = header_end
            .checked_add(body)
            .and_then(|v| v.checked_add(4))
            .ok_or_else(|| self.overflow())?;
        let actual = self.buf.len() as u64;
        if actual != expected {
            return Err(Error::format(
                header_end,
                format!(
                    "{} length mismatch: expected {expected} bytes, found {actual}",
                    self.what
                ),
            ));
        }
        let stored = u32::from_le_bytes(self.buf[self.buf.len() - 4..].try_into().unwrap());
        let crc = crc32fast::hash(&self.buf[..self.pos]);
        if stored != crc {
            return Err(Error::format(
                actual - 4,
                format!("{} header checksum mismatch", self.what),
            ));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(Error::at_path(path))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(Error::at_path(dir))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(Error::at_path(&tmp))?;
    std::fs::rename(&tmp, path).map_err(Error::at_path(path))
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u32")))
}
