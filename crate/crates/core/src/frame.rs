//! RGB frames with pixel values in `[0, 1]`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{EdenError, Result};

/// An RGB frame stored row-major as `(height, width, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(EdenError::Dimension(format!(
                "frame must be non-empty, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(EdenError::shape(height * width * 3, pixels.len()));
        }
        if let Some(bad) = pixels
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(EdenError::InvalidArgument(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    pixels.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// Errors unless both sides are divisible by `multiple`.
    pub fn check_divisible(&self, multiple: usize) -> Result<()> {
        if !self.height.is_multiple_of(multiple) || !self.width.is_multiple_of(multiple) {
            return Err(EdenError::Dimension(format!(
                "frame {}x{} is not divisible by {multiple}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(EdenError::Data(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds frame {}x{}",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let start = (y * self.width + left) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + width * 3]);
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| EdenError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let pixels = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, pixels)
    }

    /// Quantizes to 8 bits and writes a PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self
            .pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| EdenError::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }
}

/// Stacks frames of equal size into a `(batch, height, width, 3)` tensor.
pub fn frames_to_tensor(frames: &[&Frame], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| EdenError::InvalidArgument("empty frame batch".into()))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(frames.len() * h * w * 3);
    for f in frames {
        if f.dims() != (h, w) {
            return Err(EdenError::shape((h, w), f.dims()));
        }
        data.extend_from_slice(&f.pixels);
    }
    Ok(Tensor::from_vec(data, (frames.len(), h, w, 3), device)?.to_dtype(dtype)?)
}

/// Splits a `(batch, height, width, 3)` tensor back into frames, clamping to `[0, 1]`.
pub fn tensor_to_frames(t: &Tensor) -> Result<Vec<Frame>> {
    let (b, h, w, c) = t.dims4()?;
    if c != 3 {
        return Err(EdenError::shape("(b, h, w, 3)", t.dims()));
    }
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    flat.chunks(h * w * 3)
        .take(b)
        .map(|chunk| {
            let pixels = chunk
                .iter()
                .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
                .collect();
            Frame::new(h, w, pixels)
        })
        .collect()
}
