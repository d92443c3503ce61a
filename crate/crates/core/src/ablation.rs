//! Artificial negatives: token-drop grids, black fill, blank images, pooling.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mask::PixelMask;

pub const DEFAULT_PATCH_SIZE: usize = 14;
pub const DEFAULT_MERGE: usize = 2;
pub const DEFAULT_BLANK_SIDE: usize = 448;

/// Keep flags over the patch grid, row-major. `keep[r][c]` is constant within
/// every `merge × merge` block of patches.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TokenDropMask {
    pub patch_size: usize,
    pub merge: usize,
    pub rows: usize,
    pub cols: usize,
    pub keep: Vec<Vec<bool>>,
}

impl TokenDropMask {
    pub fn dropped(&self) -> usize {
        self.keep.iter().flatten().filter(|k| !**k).count()
    }

    /// Every merge group carries a single keep flag.
    pub fn is_group_coherent(&self) -> bool {
        (0..self.rows).all(|r| {
            (0..self.cols).all(|c| {
                let (r0, c0) = (r / self.merge * self.merge, c / self.merge * self.merge);
                self.keep[r][c] == self.keep[r0][c0]
            })
        })
    }
}

/// Drop every merged region of `merge·patch_size` pixels that holds at least
/// one mask pixel.
pub fn condense_mask(mask: &PixelMask, patch_size: usize, merge: usize) -> Result<TokenDropMask> {
    if patch_size == 0 || merge == 0 {
        return Err(Error::InvalidArgument("patch size and merge must be positive".into()));
    }
    let (w, h) = (mask.width(), mask.height());
    let rows = h.div_ceil(patch_size);
    let cols = w.div_ceil(patch_size);
    let region = patch_size * merge;
    let (grows, gcols) = (rows.div_ceil(merge), cols.div_ceil(merge));
    let mut hit = vec![false; grows * gcols];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                hit[(y / region) * gcols + x / region] = true;
            }
        }
    }
    let keep = (0..rows)
        .map(|r| (0..cols).map(|c| !hit[(r / merge) * gcols + c / merge]).collect())
        .collect();
    Ok(TokenDropMask { patch_size, merge, rows, cols, keep })
}

/// Packed 8-bit RGB, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch { expected: width * height * 3, found: data.len() });
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Set masked pixels to black; all others are left untouched.
pub fn black_fill(image: &RgbImage, mask: &PixelMask) -> Result<RgbImage> {
    if (mask.width(), mask.height()) != (image.width, image.height) {
        return Err(Error::DimensionMismatch {
            expected: image.width * image.height,
            found: mask.width() * mask.height(),
        });
    }
    let mut out = image.clone();
    for (i, &m) in mask.bits().iter().enumerate() {
        if m {
            out.data[i * 3..i * 3 + 3].fill(0);
        }
    }
    Ok(out)
}

pub fn blank_image(width: usize, height: usize) -> Result<RgbImage> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("blank image needs positive dimensions".into()));
    }
    Ok(RgbImage { width, height, data: vec![0; width * height * 3] })
}

/// Component-wise mean of equally sized vectors.
pub fn mean_pool(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors.first().ok_or(Error::EmptyInput("patch embeddings"))?;
    let dim = first.len();
    let mut acc = vec![0.0; dim];
    for v in vectors {
        if v.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: v.len() });
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example_56() {
        let mut m = PixelMask::empty(56, 56);
        m.set(5, 5, true);
        let t = condense_mask(&m, 14, 2).unwrap();
        assert_eq!((t.rows, t.cols), (4, 4));
        assert_eq!(t.dropped(), 4);
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert!(!t.keep[r][c]);
        }
        assert!(t.is_group_coherent());
    }

    #[test]
    fn empty_and_full_masks() {
        let t = condense_mask(&PixelMask::empty(30, 20), 14, 2).unwrap();
        assert_eq!((t.rows, t.cols, t.dropped()), (2, 3, 0));
        let t = condense_mask(&PixelMask::full(30, 20), 14, 2).unwrap();
        assert_eq!(t.dropped(), 6);
    }

    #[test]
    fn black_fill_half() {
        let img = RgbImage::new(4, 4, (0..48).map(|i| i as u8 + 1).collect()).unwrap();
        let mut m = PixelMask::empty(4, 4);
        for y in 0..4 {
            for x in 0..2 {
                m.set(x, y, true);
            }
        }
        let out = black_fill(&img, &m).unwrap();
        let black = (0..16).filter(|i| out.pixel(i % 4, i / 4) == [0, 0, 0]).count();
        assert_eq!(black, 8);
        assert_eq!(out.pixel(3, 3), img.pixel(3, 3));
        assert_eq!(black_fill(&out, &m).unwrap(), out);
        assert!(black_fill(&img, &PixelMask::empty(3, 4)).is_err());
    }

    #[test]
    fn blank() {
        let b = blank_image(1, 1).unwrap();
        assert_eq!(b.data, vec![0, 0, 0]);
        assert!(blank_image(0, 3).is_err());
    }

    #[test]
    fn pooling() {
        assert_eq!(mean_pool(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(mean_pool(&[vec![3.0]]).unwrap(), vec![3.0]);
        assert!(mean_pool(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(mean_pool(&[]).is_err());
    }
}
