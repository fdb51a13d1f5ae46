//! The `UNRY` binary unary-probability format.
//!
//! Layout: the magic `UNRY`, then `height`, `width`, `labels` as little-endian
//! `u32`, then `height * width * labels` little-endian `f32` probabilities in
//! row-major pixel order with the label index fastest.

use std::fs;
use std::path::Path;

use crate::crf::LabelDistributionImage;
use crate::error::{Error, Result};

pub const UNARY_MAGIC: &[u8; 4] = b"UNRY";

/// Largest accepted deviation of a stored pixel sum from one.
pub const UNARY_SUM_TOLERANCE: f64 = 1e-3;

pub fn decode_unary(path: &Path, bytes: &[u8]) -> Result<LabelDistributionImage<f64>> {
    if bytes.len() < 16 || &bytes[..4] != UNARY_MAGIC {
        return Err(Error::format(path, "missing UNRY magic"));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (h, w, labels) = (dim(0), dim(1), dim(2));
    if h == 0 || w == 0 || labels == 0 {
        return Err(Error::format(path, format!("empty dimensions {h}x{w}x{labels}")));
    }
    let count = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(labels))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| Error::format(path, format!("dimensions {h}x{w}x{labels} overflow")))?;
    let body = &bytes[16..];
    if body.len() != count * 4 {
        return Err(Error::format(
            path,
            format!(
                "{h}x{w}x{labels} needs {} data bytes, file has {}",
                count * 4,
                body.len()
            ),
        ));
    }
    let mut data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    for (pixel, dist) in data.chunks_exact_mut(labels).enumerate() {
        if let Some(l) = dist.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::format(
                path,
                format!("pixel {pixel} label {l}: invalid probability {}", dist[l]),
            ));
        }
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > UNARY_SUM_TOLERANCE {
            return Err(Error::format(
                path,
                format!("pixel {pixel}: probabilities sum to {sum}"),
            ));
        }
        dist.iter_mut().for_each(|p| *p /= sum);
    }
    Ok(LabelDistributionImage::from_normalized(h, w, labels, data))
}

pub fn read_unary(path: impl AsRef<Path>) -> Result<LabelDistributionImage<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_unary(path, &bytes)
}

pub fn encode_unary(probs: &LabelDistributionImage<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + probs.data().len() * 4);
    out.extend_from_slice(UNARY_MAGIC);
    for d in [probs.height(), probs.width(), probs.labels()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &p in probs.data() {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

pub fn write_unary(path: impl AsRef<Path>, probs: &LabelDistributionImage<f64>) -> Result<()> {
    fs::write(path, encode_unary(probs))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(h: u32, w: u32, l: u32, values: &[f32]) -> Vec<u8> {
        let mut b = b"UNRY".to_vec();
        for d in [h, w, l] {
            b.extend_from_slice(&d.to_le_bytes());
        }
        for v in values {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn decodes_examples() {
        let p = Path::new("u.unry");
        let img = decode_unary(p, &raw(1, 1, 2, &[0.5, 0.5])).unwrap();
        assert_eq!(img.data(), &[0.5, 0.5]);

        assert!(decode_unary(p, &raw(1, 1, 2, &[0.45, 0.45])).is_err());

        let img = decode_unary(p, &raw(1, 1, 2, &[0.6004, 0.4])).unwrap();
        let sum: f64 = img.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
        let s = 0.6004f32 as f64 + 0.4f32 as f64;
        assert_eq!(img.data()[1], 0.4f32 as f64 / s);
    }

    #[test]
    fn rejects_malformed() {
        let p = Path::new("u.unry");
        let mut bad = raw(1, 1, 2, &[0.5, 0.5]);
        bad[0] = b'X';
        assert!(decode_unary(p, &bad).is_err());
        assert!(decode_unary(p, &raw(1, 2, 2, &[0.5, 0.5])).is_err());
        assert!(decode_unary(p, &raw(u32::MAX, u32::MAX, u32::MAX, &[])).is_err());
        assert!(decode_unary(p, &raw(1, 1, 2, &[1.5, -0.5])).is_err());
        assert!(decode_unary(p, &raw(0, 1, 2, &[])).is_err());
    }

    #[test]
    fn round_trip_through_f32() {
        let img = LabelDistributionImage::new(1, 2, 3, vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0]).unwrap();
        let back = decode_unary(Path::new("x"), &encode_unary(&img)).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}
