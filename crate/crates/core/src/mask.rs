// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary masks over images or token grids.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::binio::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};

const MASK_MAGIC: &[u8; 8] = b"SAEMSK1\0";
const MASK_VERSION: u32 = 1;

/// Row-major bitset of `width x height` cells.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<u64>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mask({}x{}, {} set)", self.width, self.height, self.count())
    }
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![0; (width * height).div_ceil(64)],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        let mut m = Self::empty(width, height);
        for i in 0..width * height {
            m.bits[i / 64] |= 1 << (i % 64);
        }
        m
    }

    pub fn from_bools(width: usize, height: usize, cells: &[bool]) -> Result<Self> {
        if cells.len() != width * height {
            return Err(Error::invalid(format!(
                "{} cells given for a {width}x{height} mask",
                cells.len()
            )));
        }
        let mut m = Self::empty(width, height);
        for (i, &c) in cells.iter().enumerate() {
            if c {
                m.bits[i / 64] |= 1 << (i % 64);
            }
        }
        Ok(m)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        let i = y * self.width + x;
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        let i = y * self.width + x;
        if on {
            self.bits[i / 64] |= 1 << (i % 64);
        } else {
            self.bits[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&w| w == 0)
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.width * self.height)
            .map(|i| self.bits[i / 64] >> (i % 64) & 1 == 1)
            .collect()
    }

    fn same_dims(&self, other: &Mask) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::invalid(format!(
                "mask dimensions differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &Mask) -> Result<usize> {
        self.same_dims(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum())
    }

    pub fn union_count(&self, other: &Mask) -> Result<usize> {
        self.same_dims(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum())
    }

    pub fn union_with(&mut self, other: &Mask) -> Result<()> {
        self.same_dims(other)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    /// Block replication to `width x height`; both must be multiples of the
    /// current dimensions.
    pub fn upsample(&self, width: usize, height: usize) -> Result<Mask> {
        if self.width == 0
            || self.height == 0
            || !width.is_multiple_of(self.width)
            || !height.is_multiple_of(self.height)
        {
            return Err(Error::invalid(format!(
                "cannot upsample {}x{} to {width}x{height}",
                self.width, self.height
            )));
        }
        let (fx, fy) = (width / self.width, height / self.height);
        let mut out = Mask::empty(width, height);
        for y in 0..height {
            for x in 0..width {
                if self.get(x / fx, y / fy) {
                    out.set(x, y, true);
                }
            }
        }
        Ok(out)
    }

    /// Packed 1-bit-per-cell file with a width/height header.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_capacity(32 + self.width * self.height / 8);
        w.bytes(MASK_MAGIC);
        w.u32(MASK_VERSION);
        w.u32(binio::to_u32(self.width, "width")?);
        w.u32(binio::to_u32(self.height, "height")?);
        w.end_header();
        let mut packed = vec![0u8; (self.width * self.height).div_ceil(8)];
        for (i, on) in self.to_bools().into_iter().enumerate() {
            if on {
                packed[i / 8] |= 0x80 >> (i % 8);
            }
        }
        w.bytes(&packed);
        Ok(w.finish())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf, "mask file");
        r.preamble(MASK_MAGIC, MASK_VERSION)?;
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let n = (width * height).div_ceil(8);
        r.expect_body_and_trailer(n as u64)?;
        let packed = r.take(n)?;
        let cells: Vec<bool> = (0..width * height)
            .map(|i| packed[i / 8] & (0x80 >> (i % 8)) != 0)
            .collect();
        Self::from_bools(width, height, &cells)
    }

    /// Reads a packed mask file, or a grayscale image thresholded at 128
    /// when the path has an image extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "bmp"));
        if is_image {
            let img = image::open(path)?.to_luma8();
            let cells: Vec<bool> = img.pixels().map(|p| p.0[0] >= 128).collect();
            Self::from_bools(img.width() as usize, img.height() as usize, &cells)
        } else {
            Self::from_bytes(&binio::read_file(path)?)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        binio::write_file(path.as_ref(), &self.to_bytes()?)
    }

    /// Cells as a string of `0`/`1`, row-major.
    pub fn to_cell_string(&self) -> String {
        self.to_bools().into_iter().map(|b| if b { '1' } else { '0' }).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct MaskRepr {
    width: usize,
    height: usize,
    cells: String,
}

impl Serialize for Mask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MaskRepr {
            width: self.width,
            height: self.height,
            cells: self.to_cell_string(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = MaskRepr::deserialize(d)?;
        let cells: Vec<bool> = r
            .cells
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(serde::de::Error::custom("mask cells must be 0 or 1")),
            })
            .collect::<std::result::Result<_, _>>()?;
        Mask::from_bools(r.width, r.height, &cells).map_err(serde::de::Error::custom)
    }
}
