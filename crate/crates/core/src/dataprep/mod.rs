//! Images, line-drawing extraction and the synthetic dataset.
//!
//! Pixel bytes map to tensor values by `v / 127.5 − 1`; the way back clamps
//! to `[−1, 1]` and rounds half away from zero, so every byte survives a
//! load/save round trip.

mod codec;
mod lines;
mod manifest;
mod synthetic;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub use codec::{decode, encode, read_image, write_image, ImageFormat};
pub use lines::{dilate, extract_line, luma, simplify_stub, to_gray, DEFAULT_DILATION_RADIUS};
pub use manifest::{load_pairs, DatasetManifest, Split};
pub use synthetic::{generate_synthetic, render_figure, Palette, BLUE, RED};

/// 8-bit interleaved, row-major image with 1, 3 or 4 channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if ![1, 3, 4].contains(&channels) {
            return Err(Error::invalid(format!("images have 1, 3 or 4 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, pixel: &[u8]) -> Result<Self> {
        let data = pixel.iter().copied().cycle().take(width * height * pixel.len()).collect();
        Self::new(width, height, pixel.len(), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Three channels: grey is replicated, alpha is dropped.
    pub fn to_rgb(&self) -> ImageBuffer {
        let data = match self.channels {
            3 => self.data.clone(),
            1 => self.data.iter().flat_map(|&g| [g, g, g]).collect(),
            _ => self.data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        };
        ImageBuffer { width: self.width, height: self.height, channels: 3, data }
    }

    /// `[1,C,H,W]` in `[−1,1]`.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        self.planar(dequantize)
    }

    /// `[1,C,H,W]` in `[0,1]` (`v / 255`), for masks.
    pub fn to_unit_tensor<T: Element>(&self) -> Tensor<T> {
        self.planar(|b| b as f64 / 255.0)
    }

    fn planar<T: Element>(&self, f: impl Fn(u8) -> f64) -> Tensor<T> {
        let (c, plane) = (self.channels, self.width * self.height);
        Tensor::from_fn([1, c, self.height, self.width], |i| {
            let (ch, p) = (i / plane, i % plane);
            T::lit(f(self.data[p * c + ch]))
        })
    }

    /// Quantizes `[C,H,W]` or `[1,C,H,W]` values in `[−1,1]`; out-of-range values are clamped.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = match *t.shape() {
            [c, h, w] | [1, c, h, w] => (c, h, w),
            _ => return Err(Error::shape("save_image", format!("expected [C,H,W] or [1,C,H,W], got {:?}", t.shape()))),
        };
        let plane = h * w;
        let src = t.data();
        let mut data = vec![0u8; c * plane];
        for (i, out) in data.iter_mut().enumerate() {
            let (p, ch) = (i / c, i % c);
            *out = quantize(src[ch * plane + p].to_f64().unwrap_or(0.0));
        }
        Self::new(w, h, c, data)
    }
}

pub fn dequantize(byte: u8) -> f64 {
    byte as f64 / 127.5 - 1.0
}

/// `[−1,1] → 0..=255`, clamping first and rounding half away from zero; NaN maps to 0.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Reads an image file as a `[1,C,H,W]` tensor in `[−1,1]`.
pub fn load_normalized<T: Element>(path: &std::path::Path) -> Result<Tensor<T>> {
    Ok(read_image(path)?.to_tensor())
}

/// Writes `[C,H,W]` or `[1,C,H,W]` values in `[−1,1]`; the format follows the extension.
pub fn save_image<T: Element>(t: &Tensor<T>, path: &std::path::Path) -> Result<()> {
    write_image(&ImageBuffer::from_tensor(t)?, path)
}

/// Nearest-neighbour resampling.
pub fn resize_nearest(img: &ImageBuffer, width: usize, height: usize) -> Result<ImageBuffer> {
    check_resize(img, width, height)?;
    let c = img.channels;
    let mut data = Vec::with_capacity(width * height * c);
    for y in 0..height {
        let sy = (y * img.height) / height;
        for x in 0..width {
            let sx = (x * img.width) / width;
            data.extend_from_slice(img.pixel(sx, sy));
        }
    }
    ImageBuffer::new(width, height, c, data)
}

/// Box-filter resampling: each output pixel averages the source pixels
/// whose integer span it covers.
pub fn resize_box(img: &ImageBuffer, width: usize, height: usize) -> Result<ImageBuffer> {
    check_resize(img, width, height)?;
    let c = img.channels;
    let span = |i: usize, out: usize, src: usize| {
        let lo = i * src / out;
        let hi = ((i + 1) * src).div_ceil(out).max(lo + 1);
        lo..hi
    };
    let mut data = Vec::with_capacity(width * height * c);
    for y in 0..height {
        let ys = span(y, height, img.height);
        for x in 0..width {
            let xs = span(x, width, img.width);
            let count = (ys.len() * xs.len()) as u32;
            for ch in 0..c {
                let mut sum = 0u32;
                for sy in ys.clone() {
                    for sx in xs.clone() {
                        sum += img.pixel(sx, sy)[ch] as u32;
                    }
                }
                data.push(((sum + count / 2) / count) as u8);
            }
        }
    }
    ImageBuffer::new(width, height, c, data)
}

fn check_resize(img: &ImageBuffer, width: usize, height: usize) -> Result<()> {
    if img.is_empty() || width == 0 || height == 0 {
        return Err(Error::invalid("cannot resize to or from an empty image"));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
