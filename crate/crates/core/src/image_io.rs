//! Image loading, preprocessing and 8-bit map export.

use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Channel-major `3 × H × W` pixel array.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl PixelImage {
    pub fn from_chw(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::ShapeMismatch(format!("{} values for a 3x{height}x{width} image", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

fn unreadable(path: &Path, reason: impl ToString) -> Error {
    Error::UnreadableImage { path: path.to_path_buf(), reason: reason.to_string() }
}

/// Loads an image, resizes it to `side × side` (bilinear) and applies
/// per-channel `(x − mean) / std` to values in `[0, 1]`.
pub fn load_preprocessed(path: &Path, side: usize, mean: [f64; 3], std: [f64; 3]) -> Result<PixelImage> {
    let img = image::open(path).map_err(|e| unreadable(path, e))?.to_rgb8();
    let img = if img.width() as usize != side || img.height() as usize != side {
        image::imageops::resize(&img, side as u32, side as u32, FilterType::Triangle)
    } else {
        img
    };
    let mut data = vec![0.0; 3 * side * side];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            let v = px.0[c] as f64 / 255.0;
            data[(c * side + y as usize) * side + x as usize] = (v - mean[c]) / std[c];
        }
    }
    PixelImage::from_chw(side, side, data)
}

/// Loads a mask as `{0, 1}` values (threshold 127/255), resized with
/// nearest-neighbour sampling when `size` differs from the file.
pub fn load_mask(path: &Path, size: Option<(usize, usize)>) -> Result<Mat> {
    let img = image::open(path).map_err(|e| unreadable(path, e))?.to_luma8();
    let img = match size {
        Some((h, w)) if (img.height() as usize, img.width() as usize) != (h, w) => {
            image::imageops::resize(&img, w as u32, h as u32, FilterType::Nearest)
        }
        _ => img,
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p.0[0] > 127 { 1.0 } else { 0.0 }).collect();
    Mat::from_vec(h, w, data)
}

/// Writes a `[0, 1]` map as 8-bit grayscale with value `round(255·M)`.
pub fn save_map_png(map: &Mat, path: &Path) -> Result<()> {
    let mut img = GrayImage::new(map.cols() as u32, map.rows() as u32);
    for r in 0..map.rows() {
        for c in 0..map.cols() {
            img.put_pixel(c as u32, r as u32, Luma([quantize(map[(r, c)])]));
        }
    }
    img.save(path).map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.2), 51);
    }

    #[test]
    fn mask_round_trip_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut img = GrayImage::new(3, 2);
        img.put_pixel(0, 0, Luma([128]));
        img.put_pixel(2, 1, Luma([127]));
        img.save(&path).unwrap();
        let m = load_mask(&path, None).unwrap();
        assert_eq!(m.as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn missing_file_is_unreadable() {
        let err = load_preprocessed(Path::new("/nonexistent/x.png"), 32, [0.5; 3], [0.5; 3]).unwrap_err();
        assert!(matches!(err, Error::UnreadableImage { .. }));
    }
}
