//! Single-channel images with intensities in [0, 1].

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::path::Path;

pub const MIN_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(invalid(format!("image {width}x{height} smaller than {MIN_SIDE}x{MIN_SIDE}")));
        }
        if pixels.len() != width * height {
            return Err(invalid(format!("{} pixels for a {width}x{height} image", pixels.len())));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Clamps into [0, 1] (NaN maps to 0) instead of rejecting.
    pub fn from_clamped(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        let pixels = pixels.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn same_dims(&self, other: &GrayImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_resolution(&self, resolution: usize) -> Result<()> {
        if self.width != resolution || self.height != resolution {
            return Err(invalid(format!(
                "expected {resolution}x{resolution} image, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.into_luma8();
        let (w, h) = img.dimensions();
        let pixels = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Self::new(w as usize, h as usize, pixels)
    }

    /// 8-bit encoding, rounding half up.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        image::write_buffer_with_format(
            &mut buf,
            &self.to_u8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
            image::ImageFormat::Png,
        )?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    /// Round-trips through the 8-bit storage format.
    pub fn quantized(&self) -> Self {
        let pixels = self.to_u8().into_iter().map(|v| v as f32 / 255.0).collect();
        Self { width: self.width, height: self.height, pixels }
    }

    /// 1x1xHxW tensor mapping [0, 1] affinely onto [lo, hi].
    pub fn to_tensor<T: Scalar>(&self, lo: f64, hi: f64) -> Tensor<T> {
        let data = self.pixels.iter().map(|&v| T::from_f64(lo + (hi - lo) * v as f64).unwrap()).collect();
        Tensor::from_vec(&[1, 1, self.height, self.width], data).unwrap()
    }

    /// Stacks images into an Nx1xHxW tensor.
    pub fn batch<T: Scalar>(images: &[&GrayImage], lo: f64, hi: f64) -> Tensor<T> {
        let ts: Vec<Tensor<T>> = images.iter().map(|im| im.to_tensor::<T>(lo, hi).reshape(&[1, im.height, im.width])).collect();
        Tensor::stack(&ts)
    }

    /// Inverse of [`GrayImage::to_tensor`] for sample `n` of a single-channel batch, clamping to [0, 1].
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize, lo: f64, hi: f64) -> Result<Self> {
        let (_, c, h, w) = t.dims4();
        if c != 1 {
            return Err(invalid(format!("expected one channel, got {c}")));
        }
        let pixels = t.item(n).iter().map(|v| ((v.to_f64().unwrap() - lo) / (hi - lo)) as f32).collect();
        Self::from_clamped(w, h, pixels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid() {
        assert!(GrayImage::new(4, 8, vec![0.0; 32]).is_err());
        assert!(GrayImage::new(8, 8, vec![0.0; 63]).is_err());
        assert!(GrayImage::new(8, 8, vec![1.5; 64]).is_err());
    }

    #[test]
    fn png_roundtrip_rounds_half_up() {
        let mut px = vec![0.0f32; 64];
        px[0] = 0.5; // 127.5 -> 128
        px[1] = 1.0;
        px[2] = 0.25;
        let img = GrayImage::new(8, 8, px).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = GrayImage::load_png(&p).unwrap();
        assert_eq!(back.to_u8()[..3], [128, 255, 64]);
        assert_eq!(back, img.quantized());
    }
}
