//! 8-bit RGB images with PNG I/O and a float view for the codec.

use crate::error::{Error, Result};
use ndarray::Array3;
use std::path::Path;

/// An owned RGB image. Pixels are 8-bit; `to_float` exposes the [0,1]
/// view the codec works in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8 {
    pub height: usize,
    pub width: usize,
    /// Row-major RGB triples, `3 * width * height` bytes.
    pub data: Vec<u8>,
}

impl Rgb8 {
    pub fn filled(height: usize, width: usize, color: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&color);
        }
        Rgb8 {
            height,
            width,
            data,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, color: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&color);
    }

    /// (h, w, 3) float array scaled to [0, 1].
    pub fn to_float(&self) -> Array3<f64> {
        Array3::from_shape_fn((self.height, self.width, 3), |(y, x, c)| {
            self.data[(y * self.width + x) * 3 + c] as f64 / 255.0
        })
    }

    /// Quantize a float image back to 8 bits, clamping to [0, 1].
    pub fn from_float(arr: &Array3<f64>) -> Self {
        let (h, w, c) = arr.dim();
        assert_eq!(c, 3, "expected 3 channels, got {c}");
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = (arr[(y, x, ch)].clamp(0.0, 1.0) * 255.0).round();
                    data.push(v as u8);
                }
            }
        }
        Rgb8 {
            height: h,
            width: w,
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| Error::Data("image buffer size mismatch".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Data(format!("png encode at {}: {other}", path.display())),
            })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Data(format!("png decode at {}: {other}", path.display())),
            })?
            .to_rgb8();
        Ok(Rgb8 {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.into_raw(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_roundtrip_is_exact_on_8bit_values() {
        let mut img = Rgb8::filled(4, 6, [10, 200, 77]);
        img.set(2, 3, [0, 128, 255]);
        let back = Rgb8::from_float(&img.to_float());
        assert_eq!(img, back);
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut img = Rgb8::filled(8, 8, [3, 5, 7]);
        img.set(0, 0, [255, 0, 1]);
        img.save_png(&path).unwrap();
        assert_eq!(Rgb8::load_png(&path).unwrap(), img);
    }
}
