//! 8-bit PNG and binary PGM (P5) / PPM (P6) reading and writing.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use super::{Mask, PlaneImage};
use crate::error::{Error, Result};

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

pub fn read_image(path: impl AsRef<Path>) -> Result<PlaneImage> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub(crate) fn decode(bytes: &[u8]) -> Result<PlaneImage> {
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(bytes)
    } else {
        Err(Error::format("unsupported image format (expected PNG, PGM P5 or PPM P6)"))
    }
}

fn decode_png(bytes: &[u8]) -> Result<PlaneImage> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(format!("png: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(format!("png: only 8-bit images are supported, got {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let (src_ch, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(Error::format(format!("png: unsupported color type {other:?}"))),
    };
    let pixels = &buf[..info.buffer_size()];
    let mut data = vec![0.0; keep * h * w];
    for (k, px) in pixels.chunks_exact(src_ch).enumerate() {
        for c in 0..keep {
            data[c * h * w + k] = px[c] as f64 / 255.0;
        }
    }
    PlaneImage::new(keep, h, w, data)
}

/// Splits the whitespace/comment separated PNM header fields and returns
/// them with the offset of the first raster byte.
fn pnm_header(bytes: &[u8]) -> Result<([usize; 3], usize)> {
    let mut fields = [0usize; 3];
    let mut pos = 2;
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format("truncated PNM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("malformed PNM header field"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => Ok((fields, pos + 1)),
        _ => Err(Error::format("truncated PNM header")),
    }
}

fn decode_pnm(bytes: &[u8]) -> Result<PlaneImage> {
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    let ([w, h, maxval], start) = pnm_header(bytes)?;
    if maxval != 255 {
        return Err(Error::format(format!("PNM maxval {maxval} unsupported (only 8-bit)")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format("PNM image has a zero dimension"));
    }
    let needed = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::format("PNM dimensions overflow"))?;
    let raster = &bytes[start..];
    if raster.len() < needed {
        return Err(Error::format(format!(
            "truncated PNM raster: expected {needed} bytes, found {}",
            raster.len()
        )));
    }
    let mut data = vec![0.0; needed];
    for (k, px) in raster[..needed].chunks_exact(channels).enumerate() {
        for c in 0..channels {
            data[c * h * w + k] = px[c] as f64 / 255.0;
        }
    }
    PlaneImage::new(channels, h, w, data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn interleaved(img: &PlaneImage) -> Vec<u8> {
    let n = img.height() * img.width();
    let c = img.channels();
    let mut out = vec![0u8; n * c];
    for k in 0..n {
        for ch in 0..c {
            out[k * c + ch] = quantize(img.data()[ch * n + k]);
        }
    }
    out
}

/// Writes PNG for `.png`, otherwise PGM/PPM chosen by the channel count.
pub fn write_image(img: &PlaneImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => write_png(img, path),
        Some("pgm") | Some("ppm") | Some("pnm") => write_pnm(img, path),
        _ => Err(Error::invalid(format!(
            "cannot infer image format from {}",
            path.display()
        ))),
    }
}

fn write_png(img: &PlaneImage, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    encoder.set_color(if img.channels() == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    encoder.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::Io(io),
        other => Error::format(format!("png: {other}")),
    };
    let mut writer = encoder.write_header().map_err(to_err)?;
    writer.write_image_data(&interleaved(img)).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

fn write_pnm(img: &PlaneImage, path: &Path) -> Result<()> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut bytes = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    bytes.extend(interleaved(img));
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a mask image; pixels brighter than one half are set.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let img = read_image(path)?;
    let lum = super::luminance(&img)?;
    Mask::new(lum.height(), lum.width(), lum.data().iter().map(|&v| v > 0.5).collect())
}

pub fn write_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let data = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    write_image(&PlaneImage::new(1, mask.height(), mask.width(), data)?, path)
}
