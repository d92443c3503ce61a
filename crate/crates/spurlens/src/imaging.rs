//! Image decoding and encoding around the ablation geometry.
//!
//! Token-drop masks are written as JSON
//! `{patch_size, merge, rows, cols, keep: [[bool]]}` with `keep[r][c]` false
//! for dropped patches.

use std::io::Cursor;

use spurlens_core::ablation::{self, RgbImage, TokenDropMask};
use spurlens_core::mask::PixelMask;

use crate::error::{Error, Result};

fn image_err(what: &str, e: impl std::fmt::Display) -> Error {
    Error::Field { path: Default::default(), field: "image".into(), message: format!("{what}: {e}") }
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory(bytes).map_err(|e| image_err("decode", e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(RgbImage::new(w, h, img.into_raw())?)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| image_err("encode", "buffer does not match dimensions"))?;
    let mut out = Vec::new();
    buf.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png).map_err(|e| image_err("encode", e))?;
    Ok(out)
}

/// Black-fill masked pixels; the result is PNG so it survives losslessly.
pub fn black_fill_bytes(bytes: &[u8], mask: &PixelMask) -> Result<Vec<u8>> {
    encode_png(&ablation::black_fill(&decode_rgb(bytes)?, mask)?)
}

pub fn blank_png(width: usize, height: usize) -> Result<Vec<u8>> {
    encode_png(&ablation::blank_image(width, height)?)
}

pub fn token_mask_json(mask: &TokenDropMask) -> Result<String> {
    serde_json::to_string(mask).map_err(|e| Error::Cache(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_fill_round_trip() {
        let mut src = image::RgbImage::new(4, 2);
        for p in src.pixels_mut() {
            *p = image::Rgb([200, 100, 50]);
        }
        let mut bytes = Vec::new();
        src.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png).unwrap();
        let mut mask = PixelMask::empty(4, 2);
        mask.set(0, 0, true);
        mask.set(3, 1, true);
        let filled = decode_rgb(&black_fill_bytes(&bytes, &mask).unwrap()).unwrap();
        assert_eq!(filled.pixel(0, 0), [0, 0, 0]);
        assert_eq!(filled.pixel(3, 1), [0, 0, 0]);
        assert_eq!(filled.pixel(1, 0), [200, 100, 50]);
        let again = black_fill_bytes(&encode_png(&filled).unwrap(), &mask).unwrap();
        assert_eq!(decode_rgb(&again).unwrap(), filled);
    }

    #[test]
    fn blank_is_black() {
        let img = decode_rgb(&blank_png(5, 3).unwrap()).unwrap();
        assert_eq!((img.width, img.height), (5, 3));
        assert!(img.data.iter().all(|&b| b == 0));
    }

    #[test]
    fn token_mask_wire_format() {
        let mut mask = PixelMask::empty(56, 56);
        for y in 0..28 {
            for x in 0..28 {
                mask.set(x, y, true);
            }
        }
        let t = ablation::condense_mask(&mask, 14, 2).unwrap();
        let v: serde_json::Value = serde_json::from_str(&token_mask_json(&t).unwrap()).unwrap();
        assert_eq!(v["patch_size"], 14);
        assert_eq!(v["merge"], 2);
        assert_eq!(v["rows"], 4);
        assert_eq!(v["keep"][0][0], false);
        assert_eq!(v["keep"][3][3], true);
    }
}
