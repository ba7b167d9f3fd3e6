use super::ImageBuffer;
use crate::error::{Error, Result};

pub const DEFAULT_DILATION_RADIUS: usize = 1;

/// Rec. 601 luma of an RGB triple, rounded half away from zero.
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round() as u8
}

/// Single-channel luma image; alpha is ignored.
pub fn to_gray(img: &ImageBuffer) -> ImageBuffer {
    let data = match img.channels() {
        1 => img.data().to_vec(),
        c => img.data().chunks_exact(c).map(|p| luma(p[0], p[1], p[2])).collect(),
    };
    ImageBuffer::new(img.width(), img.height(), 1, data).expect("same geometry")
}

/// Max filter over a `(2r+1)²` square, clipped at the border.
pub fn dilate(gray: &ImageBuffer, radius: usize) -> ImageBuffer {
    let (w, h) = (gray.width(), gray.height());
    let src = gray.data();
    // separable: rows, then columns
    let mut rows = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            rows[y * w + x] = src[y * w + lo..=y * w + hi].iter().copied().max().unwrap_or(0);
        }
    }
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).max().unwrap_or(0);
        }
    }
    ImageBuffer::new(w, h, 1, out).expect("same geometry")
}

/// Grey, dilate, subtract the grey image from its dilation and invert:
/// `255 − (dilate(g) − g)`. Flat regions come out white.
pub fn extract_line(color: &ImageBuffer, dilation_radius: usize) -> Result<ImageBuffer> {
    if color.is_empty() {
        return Err(Error::invalid("cannot extract lines from an empty image"));
    }
    let gray = to_gray(color);
    let dilated = dilate(&gray, dilation_radius);
    let data = dilated
        .data()
        .iter()
        .zip(gray.data())
        .map(|(&d, &g)| 255 - (d - g))
        .collect();
    ImageBuffer::new(color.width(), color.height(), 1, data)
}

/// Placeholder for a learned sketch simplifier: identity, or binarization
/// where values `≥ threshold` become 255 and the rest 0.
pub fn simplify_stub(line: &ImageBuffer, threshold: Option<u8>) -> ImageBuffer {
    match threshold {
        None => line.clone(),
        Some(t) => {
            let data = line.data().iter().map(|&v| if v >= t { 255 } else { 0 }).collect();
            ImageBuffer::new(line.width(), line.height(), line.channels(), data).expect("same geometry")
        }
    }
}
