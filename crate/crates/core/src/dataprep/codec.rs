use std::io::Cursor;
use std::path::Path;

use super::ImageBuffer;
use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    /// Binary PPM (`P6`) or PGM (`P5`), picked by channel count.
    Pnm,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("png") => Ok(Self::Png),
            Some("ppm" | "pgm" | "pnm") => Ok(Self::Pnm),
            _ => Err(Error::format("image", format!("unsupported file extension in {}", path.display()))),
        }
    }
}

pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    decode(&fsutil::read(path)?).map_err(|e| match e {
        Error::Format { what, message } => Error::Format { what, message: format!("{}: {message}", path.display()) },
        other => other,
    })
}

/// Writes atomically; the format follows the extension.
pub fn write_image(img: &ImageBuffer, path: &Path) -> Result<()> {
    let format = ImageFormat::from_path(path)?;
    fsutil::write_atomic(path, &encode(img, format)?)
}

/// Decodes PNG, P5 or P6 by sniffing the leading bytes.
pub fn decode(bytes: &[u8]) -> Result<ImageBuffer> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(bytes)
    } else {
        Err(Error::format("image", "unrecognized image format"))
    }
}

pub fn encode(img: &ImageBuffer, format: ImageFormat) -> Result<Vec<u8>> {
    if img.is_empty() {
        return Err(Error::invalid("cannot encode an empty image"));
    }
    match format {
        ImageFormat::Png => encode_png(img),
        ImageFormat::Pnm => encode_pnm(img),
    }
}

fn png_error(e: impl std::fmt::Display) -> Error {
    Error::format("png", e.to_string())
}

fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(png_error)?;
    let size = reader.output_buffer_size().ok_or_else(|| png_error("image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_error)?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let (channels, data) = match info.color_type {
        png::ColorType::Grayscale => (1, buf),
        png::ColorType::Rgb => (3, buf),
        png::ColorType::Rgba => (4, buf),
        png::ColorType::GrayscaleAlpha => (4, buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0], p[1]]).collect()),
        png::ColorType::Indexed => return Err(png_error("palette was not expanded")),
    };
    ImageBuffer::new(w, h, channels, data)
}

fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(match img.channels() {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            _ => png::ColorType::Rgba,
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_error)?;
        writer.write_image_data(img.data()).map_err(png_error)?;
        writer.finish().map_err(png_error)?;
    }
    Ok(out)
}

fn encode_pnm(img: &ImageBuffer) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::invalid(format!("PNM stores 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    Ok(out)
}

fn decode_pnm(bytes: &[u8]) -> Result<ImageBuffer> {
    let bad = |m: &str| Error::format("pnm", m.to_string());
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header number"))?;
    }
    let [w, h, max] = fields;
    if max != 255 {
        return Err(bad(&format!("only 8-bit files are supported, maxval {max}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing separator after header"));
    }
    pos += 1;
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| bad("dimensions overflow"))?;
    let data = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated pixel data"))?;
    ImageBuffer::new(w, h, channels, data.to_vec())
}
