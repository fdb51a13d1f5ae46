//! Ingestion resampling for inputs that are not at depth resolution.
//! Pixel centers are aligned: destination pixel `d` samples source
//! coordinate `(d + 0.5) * src / dst - 0.5`.

use crate::crf::{LabelDistributionImage, LabelImage};
use crate::error::{Error, Result};

fn source_coord(d: usize, src: usize, dst: usize) -> f64 {
    ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64)
}

/// Bilinear interpolation of per-pixel distributions; outputs stay normalized.
pub fn resample_probabilities(
    probs: &LabelDistributionImage<f64>,
    height: usize,
    width: usize,
) -> Result<LabelDistributionImage<f64>> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("resample target must be nonempty"));
    }
    let (sh, sw, labels) = (probs.height(), probs.width(), probs.labels());
    if (sh, sw) == (height, width) {
        return Ok(probs.clone());
    }
    let mut data = Vec::with_capacity(height * width * labels);
    for r in 0..height {
        let y = source_coord(r, sh, height);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(sh - 1);
        for c in 0..width {
            let x = source_coord(c, sw, width);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(sw - 1);
            let corners = [
                (y0 * sw + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * sw + x1, (1.0 - fy) * fx),
                (y1 * sw + x0, fy * (1.0 - fx)),
                (y1 * sw + x1, fy * fx),
            ];
            let start = data.len();
            for l in 0..labels {
                data.push(corners.iter().map(|&(i, wt)| wt * probs.pixel(i)[l]).sum::<f64>());
            }
            let sum: f64 = data[start..].iter().sum();
            data[start..].iter_mut().for_each(|p| *p /= sum);
        }
    }
    LabelDistributionImage::new(height, width, labels, data)
}

/// Nearest-neighbor resampling of a label map.
pub fn resample_labels(labels: &LabelImage, height: usize, width: usize) -> Result<LabelImage> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("resample target must be nonempty"));
    }
    let (sh, sw) = (labels.height(), labels.width());
    let nearest = |d: usize, src: usize, dst: usize| ((d * src * 2 + src) / (dst * 2)).min(src - 1);
    let data = (0..height)
        .flat_map(|r| (0..width).map(move |c| (r, c)))
        .map(|(r, c)| labels.get(nearest(r, sh, height), nearest(c, sw, width)))
        .collect();
    LabelImage::new(height, width, labels.labels(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_sizes_match() {
        let p = LabelDistributionImage::new(1, 2, 2, vec![0.25, 0.75, 1.0, 0.0]).unwrap();
        assert_eq!(resample_probabilities(&p, 1, 2).unwrap(), p);
        let l = LabelImage::new(1, 3, 3, vec![0, 1, 2]).unwrap();
        assert_eq!(resample_labels(&l, 1, 3).unwrap(), l);
    }

    #[test]
    fn bilinear_midpoints() {
        let p = LabelDistributionImage::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let up = resample_probabilities(&p, 1, 4).unwrap();
        // source coords -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
        let first: Vec<f64> = up.pixels().map(|d| d[0]).collect();
        assert_eq!(first, vec![1.0, 0.75, 0.25, 0.0]);
        for d in up.pixels() {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn nearest_labels() {
        let l = LabelImage::new(2, 2, 4, vec![0, 1, 2, 3]).unwrap();
        let up = resample_labels(&l, 4, 4).unwrap();
        assert_eq!(up.data(), &[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
        let down = resample_labels(&up, 2, 2).unwrap();
        assert_eq!(down, l);
    }
}
