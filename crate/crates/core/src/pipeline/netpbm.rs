//! Binary PGM (P5) and PPM (P6) images.
//!
//! Depth maps are 16-bit PGM (big-endian samples, maxval 65535), label maps
//! 8-bit PGM and color images 8-bit PPM.

use std::fs;
use std::path::Path;

use crate::crf::{LabelImage, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::raster::{DepthImage, RgbImage};

#[derive(Debug)]
struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err("not a netpbm file".into());
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("truncated or malformed header")?;
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace after header".into()),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("bad header values {width}x{height} maxval {maxval}"));
    }
    Ok(Header {
        magic,
        width: width as usize,
        height: height as usize,
        maxval,
        offset: pos,
    })
}

fn read_body<'a>(path: &Path, bytes: &'a [u8], magic: &[u8; 2], channels: usize) -> Result<(Header, &'a [u8])> {
    let header = parse_header(bytes).map_err(|m| Error::format(path, m))?;
    if &header.magic != magic {
        return Err(Error::format(
            path,
            format!(
                "expected {}, found {}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&header.magic)
            ),
        ));
    }
    let sample = if header.maxval > 255 { 2 } else { 1 };
    let need = header
        .width
        .checked_mul(header.height)
        .and_then(|n| n.checked_mul(channels * sample))
        .ok_or_else(|| Error::format(path, "image dimensions overflow"))?;
    let body = &bytes[header.offset..];
    if body.len() < need {
        return Err(Error::format(
            path,
            format!("expected {need} bytes of pixel data, found {}", body.len()),
        ));
    }
    Ok((header, &body[..need]))
}

fn load(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn header_bytes(magic: &str, width: usize, height: usize, maxval: u32) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n{maxval}\n").into_bytes()
}

pub fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<RgbImage> {
    let (h, body) = read_body(path, bytes, b"P6", 3)?;
    if h.maxval > 255 {
        return Err(Error::format(path, "16-bit color images are not supported"));
    }
    let data = body.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    RgbImage::new(h.height, h.width, data)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    decode_ppm(path, &load(path)?)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &RgbImage) -> Result<()> {
    let mut out = header_bytes("P6", image.width(), image.height(), 255);
    out.extend(image.pixels().iter().flatten());
    fs::write(path, out)?;
    Ok(())
}

/// Depth in stored units (millimeters by convention); `0` is invalid.
pub fn decode_depth_pgm(path: &Path, bytes: &[u8]) -> Result<DepthImage> {
    let (h, body) = read_body(path, bytes, b"P5", 1)?;
    if h.maxval <= 255 {
        return Err(Error::format(path, "depth must be a 16-bit PGM"));
    }
    let data = body
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    DepthImage::new(h.height, h.width, data)
}

pub fn read_depth_pgm(path: impl AsRef<Path>) -> Result<DepthImage> {
    let path = path.as_ref();
    decode_depth_pgm(path, &load(path)?)
}

pub fn write_depth_pgm(path: impl AsRef<Path>, depth: &DepthImage) -> Result<()> {
    let mut out = header_bytes("P5", depth.width(), depth.height(), 65535);
    for d in depth.samples() {
        out.extend_from_slice(&d.to_be_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// 8-bit label map; values must be `< labels` or the ignore value 255.
pub fn decode_label_pgm(path: &Path, bytes: &[u8], labels: usize) -> Result<LabelImage> {
    let (h, body) = read_body(path, bytes, b"P5", 1)?;
    if h.maxval > 255 {
        return Err(Error::format(path, "label maps must be 8-bit"));
    }
    if let Some(i) = body
        .iter()
        .position(|&v| v != IGNORE_LABEL && v as usize >= labels)
    {
        return Err(Error::format(
            path,
            format!("pixel {i} has label {} but only {labels} labels exist", body[i]),
        ));
    }
    LabelImage::new(h.height, h.width, labels, body.to_vec())
}

pub fn read_label_pgm(path: impl AsRef<Path>, labels: usize) -> Result<LabelImage> {
    let path = path.as_ref();
    decode_label_pgm(path, &load(path)?, labels)
}

pub fn write_label_pgm(path: impl AsRef<Path>, image: &LabelImage) -> Result<()> {
    let mut out = header_bytes("P5", image.width(), image.height(), 255);
    out.extend_from_slice(image.data());
    fs::write(path, out)?;
    Ok(())
}
