//! 8-bit RGB PNG I/O and the `[0, 255] ↔ [-1, 1]` pixel mapping.

use std::path::Path;

use image::imageops::FilterType;
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub fn to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Decode a PNG into channel-major `[-1, 1]` values, resized to `size × size`.
pub fn load_png(path: &Path, size: usize) -> Result<Vec<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::load(path, e.to_string()))?
        .to_rgb8();
    let img = if img.width() as usize != size || img.height() as usize != size {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    } else {
        img
    };
    Ok(rgb_to_chw(&img))
}

pub fn rgb_to_chw(img: &RgbImage) -> Vec<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[c * w * h + y as usize * w + x as usize] = to_unit(p[c]);
        }
    }
    out
}

/// Channel-major `[-1, 1]` values (1 or 3 channels) to an RGB image.
pub fn chw_to_rgb(data: &[f32], channels: usize, size: usize) -> RgbImage {
    let plane = size * size;
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let i = y as usize * size + x as usize;
        let ch = |c: usize| to_byte(data[c.min(channels - 1) * plane + i]);
        Rgb([ch(0), ch(1), ch(2)])
    })
}

pub fn save_png(path: &Path, data: &[f32], channels: usize, size: usize) -> Result<()> {
    if data.len() != channels * size * size {
        return Err(Error::Shape {
            expected: vec![channels, size, size],
            actual: vec![data.len()],
        });
    }
    chw_to_rgb(data, channels, size).save(path)?;
    Ok(())
}

/// Tile images into a grid: `tiles[row][col]`, each channel-major.
pub fn save_mosaic(path: &Path, tiles: &[Vec<Vec<f32>>], channels: usize, size: usize) -> Result<()> {
    let rows = tiles.len();
    let cols = tiles.iter().map(Vec::len).max().unwrap_or(0);
    if rows == 0 || cols == 0 {
        return Err(Error::validation("empty mosaic"));
    }
    let mut canvas = RgbImage::new((cols * size) as u32, (rows * size) as u32);
    for (r, row) in tiles.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let img = chw_to_rgb(tile, channels, size);
            image::imageops::replace(&mut canvas, &img, (c * size) as i64, (r * size) as i64);
        }
    }
    canvas.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_endpoints() {
        assert_eq!(to_unit(255), 1.0);
        assert_eq!(to_unit(0), -1.0);
    }

    #[test]
    fn every_byte_round_trips() {
        for v in 0..=255u8 {
            assert_eq!(to_byte(to_unit(v)), v);
        }
    }

    #[test]
    fn png_round_trip_is_exact_for_byte_levels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let data: Vec<f32> = (0..3 * 4 * 4).map(|i| to_unit((i * 5) as u8)).collect();
        save_png(&p, &data, 3, 4).unwrap();
        assert_eq!(load_png(&p, 4).unwrap(), data);
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_png(Path::new("/nonexistent/img.png"), 4).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/img.png"));
    }
}
