//! Binary pixel masks and the two annotation encodings that produce them.
//!
//! A pixel `(x, y)` is inside a polygon iff its center `(x + 0.5, y + 0.5)` is
//! inside under the even-odd rule. Run-length encodings follow the COCO
//! convention: alternating runs of 0s and 1s over pixels in column-major
//! order, starting with a (possibly empty) run of 0s.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Row-major boolean mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn empty(width: usize, height: usize) -> Self {
        PixelMask { width, height, bits: vec![false; width * height] }
    }

    pub fn full(width: usize, height: usize) -> Self {
        PixelMask { width, height, bits: vec![true; width * height] }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch { expected: width * height, found: bits.len() });
        }
        Ok(PixelMask { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Pixel-wise OR. Both masks must share dimensions.
    pub fn union_with(&mut self, other: &PixelMask) -> Result<()> {
        if other.width != self.width || other.height != self.height {
            return Err(Error::DimensionMismatch {
                expected: self.bits.len(),
                found: other.bits.len(),
            });
        }
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }
}

/// Rasterize one polygon given as a flat `[x0, y0, x1, y1, ...]` list.
pub fn rasterize_polygon(coords: &[f64], width: usize, height: usize) -> Result<PixelMask> {
    if !coords.len().is_multiple_of(2) {
        return Err(Error::InvalidPolygon("odd number of coordinates".to_string()));
    }
    if coords.len() < 6 {
        return Err(Error::InvalidPolygon("fewer than three vertices".to_string()));
    }
    if coords.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidPolygon("non-finite coordinate".to_string()));
    }
    let pts: Vec<(f64, f64)> = coords.chunks_exact(2).map(|c| (c[0], c[1])).collect();
    let mut mask = PixelMask::empty(width, height);
    let mut xs: Vec<f64> = Vec::new();
    for py in 0..height {
        let cy = py as f64 + 0.5;
        xs.clear();
        for i in 0..pts.len() {
            let (x1, y1) = pts[i];
            let (x2, y2) = pts[(i + 1) % pts.len()];
            // half-open in y so shared vertices are counted once
            if (y1 > cy) != (y2 > cy) {
                xs.push(x1 + (cy - y1) * (x2 - x1) / (y2 - y1));
            }
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        // center cx is inside iff xs[2k] <= cx < xs[2k+1] for some k
        for span in xs.chunks_exact(2) {
            let first = libm::ceil(span[0] - 0.5).max(0.0);
            let mut px = first as usize;
            while px < width && (px as f64 + 0.5) < span[1] {
                mask.set(px, py, true);
                px += 1;
            }
        }
    }
    Ok(mask)
}

/// Rasterize several polygons of one instance and OR them together.
pub fn rasterize_polygons(polys: &[Vec<f64>], width: usize, height: usize) -> Result<PixelMask> {
    let mut mask = PixelMask::empty(width, height);
    for p in polys {
        mask.union_with(&rasterize_polygon(p, width, height)?)?;
    }
    Ok(mask)
}

/// Decode uncompressed COCO RLE counts.
pub fn decode_rle(counts: &[u64], width: usize, height: usize) -> Result<PixelMask> {
    let total = width * height;
    let sum: u64 = counts.iter().sum();
    if sum != total as u64 {
        return Err(Error::InvalidRle(alloc::format!(
            "counts sum to {sum}, expected {total}"
        )));
    }
    let mut mask = PixelMask::empty(width, height);
    let mut pos = 0usize;
    for (i, &run) in counts.iter().enumerate() {
        let run = run as usize;
        if i % 2 == 1 {
            for idx in pos..pos + run {
                // column-major index -> (x, y)
                let x = idx / height;
                let y = idx % height;
                mask.set(x, y, true);
            }
        }
        pos += run;
    }
    Ok(mask)
}

/// Decode the compact string form of COCO RLE counts (6-bit groups offset by
/// 48, with counts after the second stored as deltas against `counts[i-2]`).
pub fn decode_rle_string(s: &str) -> Result<Vec<u64>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0usize;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0u32;
        let mut more = true;
        while more {
            let b = *bytes
                .get(p)
                .ok_or_else(|| Error::InvalidRle("truncated count".to_string()))?;
            if !(48..48 + 64).contains(&b) {
                return Err(Error::InvalidRle(alloc::format!("byte {b} out of range at {p}")));
            }
            let c = i64::from(b - 48);
            if k >= 12 {
                return Err(Error::InvalidRle("count too long".to_string()));
            }
            x |= (c & 0x1f) << (5 * k);
            more = c & 0x20 != 0;
            p += 1;
            k += 1;
            if !more && (c & 0x10) != 0 {
                x |= -1i64 << (5 * k);
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| u64::try_from(c).map_err(|_| Error::InvalidRle("negative count".to_string())))
        .collect()
}
