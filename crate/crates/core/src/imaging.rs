//! Float images and the bilinear resampler shared by augmentation, metric
//! preprocessing and overlay rendering.
//!
//! Resampling convention (half-pixel centers, "align corners = false"):
//! destination pixel `x` samples source coordinate
//! `sx = (x + 0.5) * in / out - 0.5`, clamped below at 0. The left tap is
//! `floor(sx)`, the right tap `min(left + 1, in - 1)`, and the weight of the
//! right tap is `sx - left`. Rows are handled identically. This matches the
//! common deep-learning framework convention for upsampling without
//! antialiasing.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, IoContext, Result};

/// Interleaved RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).at(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|v| *v as f64 / 255.0).collect();
        Ok(RgbImage {
            width: w as usize,
            height: h as usize,
            data,
        })
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let raw = self.data.iter().map(|v| quantize_u8(*v)).collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .at(path)
    }

    pub fn resize(&self, width: usize, height: usize) -> RgbImage {
        let data = resize_bilinear(&self.data, self.width, self.height, 3, width, height);
        RgbImage {
            width,
            height,
            data,
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<RgbImage> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::shape(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut out = RgbImage::new(width, height);
        for y in 0..height {
            let src = ((y0 + y) * self.width + x0) * 3;
            let dst = y * width * 3;
            out.data[dst..dst + width * 3].copy_from_slice(&self.data[src..src + width * 3]);
        }
        Ok(out)
    }
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Single-channel float map stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height || data.is_empty() {
            return Err(Error::shape(format!(
                "{} values for a {width}x{height} map",
                data.len()
            )));
        }
        Ok(GrayMap {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn resize(&self, width: usize, height: usize) -> GrayMap {
        GrayMap {
            width,
            height,
            data: resize_bilinear(&self.data, self.width, self.height, 1, width, height),
        }
    }

    /// Loads a grayscale PNG (8- or 16-bit) scaled to `[0, 1]`.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).at(path)?.to_luma16();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|v| *v as f64 / 65535.0).collect();
        GrayMap::new(w as usize, h as usize, data)
    }

    /// Writes a 16-bit grayscale PNG; values are clamped to `[0, 1]`.
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let raw: Vec<u16> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size");
        buf.save_with_format(path, image::ImageFormat::Png).at(path)
    }

    pub fn save_png8(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.data.iter().map(|v| quantize_u8(*v)).collect();
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size");
        buf.save_with_format(path, image::ImageFormat::Png).at(path)
    }
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|x| {
            let src = ((x as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of an interleaved `channels`-plane image.
pub fn resize_bilinear(
    src: &[f64],
    in_w: usize,
    in_h: usize,
    channels: usize,
    out_w: usize,
    out_h: usize,
) -> Vec<f64> {
    assert_eq!(src.len(), in_w * in_h * channels, "resize source size");
    if in_w == out_w && in_h == out_h {
        return src.to_vec();
    }
    let xt = taps(in_w, out_w);
    let yt = taps(in_h, out_h);
    let mut out = vec![0.0; out_w * out_h * channels];
    for (y, ty) in yt.iter().enumerate() {
        for (x, tx) in xt.iter().enumerate() {
            for c in 0..channels {
                let at = |yy: usize, xx: usize| src[(yy * in_w + xx) * channels + c];
                let top = at(ty.lo, tx.lo) * (1.0 - tx.frac) + at(ty.lo, tx.hi) * tx.frac;
                let bottom = at(ty.hi, tx.lo) * (1.0 - tx.frac) + at(ty.hi, tx.hi) * tx.frac;
                out[(y * out_w + x) * channels + c] = top * (1.0 - ty.frac) + bottom * ty.frac;
            }
        }
    }
    out
}
