//! Frames and masks, plus their PNG encodings.
//!
//! Frames are 8-bit RGB; binary masks are 8-bit grayscale with 0 for
//! background and 255 for foreground; soft masks are 8-bit grayscale with
//! the probability scaled to 0..=255.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use image::{ImageBuffer, ImageEncoder, Rgb};
use std::path::Path;

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbFrame {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbFrame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 || width == 0 || height == 0 {
            return Err(Error::shape(format!(
                "rgb frame {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `[3, H, W]` tensor scaled to [-1, 1].
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut out = vec![0.0; 3 * w * h];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * w * h + i] = px[c] as f64 / 127.5 - 1.0;
            }
        }
        Tensor::new(vec![3, h, w], out).expect("consistent extents")
    }

    /// Copies the `size`x`size` window with top-left corner `(left, top)`.
    pub fn crop(&self, left: usize, top: usize, size: usize) -> Result<Self> {
        if left + size > self.width || top + size > self.height {
            return Err(Error::shape(format!(
                "crop {size}x{size} at ({left}, {top}) exceeds {}x{} frame",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(size * size * 3);
        for y in top..top + size {
            let row = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[row..row + size * 3]);
        }
        Self::new(size, size, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(
            path,
            self.width,
            self.height,
            &self.data,
            image::ExtendedColorType::Rgb8,
        )
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = open_image(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn to_image(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone()).expect("consistent extents")
    }
}

/// Per-pixel foreground (1) / background (0) labelling.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "mask {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if pixels.iter().any(|&p| p > 1) {
            return Err(Error::Domain("mask pixels must be 0 or 1".into()));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![1; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y) as u8);
            }
        }
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.pixels[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.pixels[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn inverted(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| 1 - p).collect(),
        }
    }

    /// `[H, W]` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width],
            self.pixels.iter().map(|&p| p as f64).collect(),
        )
        .expect("consistent extents")
    }

    pub fn to_soft(&self) -> SoftMask {
        SoftMask {
            width: self.width,
            height: self.height,
            values: self.pixels.iter().map(|&p| p as f64).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.pixels.iter().map(|&p| p * 255).collect();
        write_png(path, self.width, self.height, &bytes, image::ExtendedColorType::L8)
    }

    /// Reads a grayscale PNG; any value >= 128 is foreground.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = open_image(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let pixels = img.into_raw().into_iter().map(|v| (v >= 128) as u8).collect();
        Self::new(w as usize, h as usize, pixels)
    }
}

/// Per-pixel foreground probability in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl SoftMask {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(format!(
                "soft mask {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("soft mask value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Foreground where `value >= threshold`.
    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            pixels: self.values.iter().map(|&v| (v >= threshold) as u8).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.values.clone()).expect("consistent extents")
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.values.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(
            path,
            self.width,
            self.height,
            &self.to_u8(),
            image::ExtendedColorType::L8,
        )
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

fn write_png(path: &Path, width: usize, height: usize, bytes: &[u8], color: image::ExtendedColorType) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(bytes, width as u32, height as u32, color)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = BinaryMask::from_fn(7, 5, |x, y| (x + y) % 3 == 0);
        let p = dir.path().join("m.png");
        m.save_png(&p).unwrap();
        assert_eq!(BinaryMask::load_png(&p).unwrap(), m);
        let raw = image::open(&p).unwrap().to_luma8().into_raw();
        assert!(raw.iter().all(|&v| v == 0 || v == 255));
    }

    #[test]
    fn frame_png_roundtrip_and_crop() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7) as u8).collect();
        let f = RgbFrame::new(4, 3, data).unwrap();
        let p = dir.path().join("f.png");
        f.save_png(&p).unwrap();
        assert_eq!(RgbFrame::load_png(&p).unwrap(), f);
        let c = f.crop(1, 1, 2).unwrap();
        assert_eq!(c.pixel(0, 0), f.pixel(1, 1));
        assert!(f.crop(3, 0, 2).is_err());
    }

    #[test]
    fn soft_threshold_tie_is_foreground() {
        let s = SoftMask::new(2, 1, vec![0.5, 0.4999]).unwrap();
        assert_eq!(s.threshold(0.5).pixels(), &[1, 0]);
        assert!(SoftMask::new(1, 1, vec![1.2]).is_err());
    }

    #[test]
    fn missing_file_reports_path() {
        let err = BinaryMask::load_png(Path::new("/nonexistent/m.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/m.png"));
    }
}
