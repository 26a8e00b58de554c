use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An HWC image with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Image {
    /// Builds an image, clamping every pixel into `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, mut pixels: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Input(format!("images have 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::Input(format!("empty image {height}x{width}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Input(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Builds an image from `f64` values, clamping into `[0, 1]`.
    pub fn from_f64(height: usize, width: usize, channels: usize, values: &[f64]) -> Result<Self> {
        Image::new(height, width, channels, values.iter().map(|&v| v as f32).collect())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Image::new(height, width, channels, vec![value; height * width * channels])
            .expect("valid dimensions")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.pixels[i..i + self.channels]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }

    /// Per-pixel luma (`0.299 R + 0.587 G + 0.114 B`, or the value itself
    /// for one channel).
    pub fn luma(&self) -> Vec<f64> {
        self.pixels
            .chunks_exact(self.channels)
            .map(|px| {
                if self.channels == 3 {
                    0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64
                } else {
                    px[0] as f64
                }
            })
            .collect()
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

/// Stacks equally sized images into an NHWC tensor.
pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Input("empty image batch".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(Error::shape(
                "batch",
                format!(
                    "image {}x{}x{} differs from {h}x{w}x{c}",
                    img.height, img.width, img.channels
                ),
            ));
        }
        data.extend(img.pixels.iter().map(|&p| p as f64));
    }
    Tensor::from_vec(vec![images.len(), h, w, c], data)
}
