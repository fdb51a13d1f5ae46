//! Fully-connected CRF over an image grid.
//!
//! Pairwise potentials combine a bilateral appearance kernel over
//! `(x, y, r, g, b)` and a spatial smoothing kernel over `(x, y)`. Inference is
//! mean-field, unrolled for a fixed number of iterations so that the whole
//! computation can be differentiated with respect to the unaries, the kernel
//! weights and the label compatibility matrix.

mod backward;
mod energy;
mod inference;
mod train;

pub use backward::{mean_field_backward, Gradients};
pub use energy::{brute_force_map, crf_energy, BRUTE_FORCE_LIMIT};
pub use inference::{
    argmax_of, build_features, map_labeling, mean_field_infer, mean_field_step, softmax_in_place,
    unary_from_probabilities, FeatureField, KernelPlans, Trace,
};
pub use train::{cross_entropy, train_crf_params, TrainConfig, TrainOutcome, TrainingSample};

use crate::error::{Error, Result};
use crate::raster::check_dims;
use crate::scalar::Real;

/// Number of Gaussian kernels: bilateral, then spatial.
pub const KERNELS: usize = 2;

/// Annotation sentinel excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Floor applied to probabilities before taking logs.
pub const PROBABILITY_FLOOR: f64 = 1e-8;

fn sum_tolerance<T: Real>(labels: usize) -> f64 {
    1e-6f64.max(4.0 * labels as f64 * T::epsilon().as_f64())
}

/// Per-pixel probability vectors over `labels` classes, row-major with the
/// label index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistributionImage<T> {
    height: usize,
    width: usize,
    labels: usize,
    data: Vec<T>,
}

impl<T: Real> LabelDistributionImage<T> {
    /// Validates that every pixel holds a nonnegative vector summing to one.
    pub fn new(height: usize, width: usize, labels: usize, data: Vec<T>) -> Result<Self> {
        check_grid(height, width, labels, data.len())?;
        let tol = sum_tolerance::<T>(labels);
        for (pixel, dist) in data.chunks_exact(labels).enumerate() {
            if let Some(label) = dist.iter().position(|&p| !(p >= T::zero()) || !p.is_finite()) {
                return Err(Error::invalid(format!(
                    "pixel {pixel} label {label}: probability {} is negative or not finite",
                    dist[label]
                )));
            }
            let sum: T = dist.iter().copied().sum();
            if (sum.as_f64() - 1.0).abs() > tol {
                return Err(Error::invalid(format!(
                    "pixel {pixel}: probabilities sum to {sum}, expected 1"
                )));
            }
        }
        Ok(LabelDistributionImage {
            height,
            width,
            labels,
            data,
        })
    }

    pub fn uniform(height: usize, width: usize, labels: usize) -> Result<Self> {
        check_grid(height, width, labels, height.saturating_mul(width) * labels)?;
        let p = T::one() / T::of(labels as f64);
        Ok(LabelDistributionImage {
            height,
            width,
            labels,
            data: vec![p; height * width * labels],
        })
    }

    /// Caller guarantees the invariants (softmax output, renormalized input).
    pub(crate) fn from_normalized(height: usize, width: usize, labels: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), height * width * labels);
        LabelDistributionImage {
            height,
            width,
            labels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn pixel(&self, index: usize) -> &[T] {
        &self.data[index * self.labels..(index + 1) * self.labels]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.labels)
    }

    /// Converts to another precision, renormalizing each pixel.
    pub fn cast<U: Real>(&self) -> LabelDistributionImage<U> {
        let mut data: Vec<U> = self.data.iter().map(|v| U::of(v.as_f64())).collect();
        for dist in data.chunks_exact_mut(self.labels) {
            let sum: U = dist.iter().copied().sum();
            dist.iter_mut().for_each(|p| *p /= sum);
        }
        LabelDistributionImage::from_normalized(self.height, self.width, self.labels, data)
    }
}

/// Per-pixel unary log-potentials `U_i(l)`; the unary energy is `-U_i(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField<T> {
    height: usize,
    width: usize,
    labels: usize,
    data: Vec<T>,
}

impl<T: Real> UnaryField<T> {
    pub fn new(height: usize, width: usize, labels: usize, data: Vec<T>) -> Result<Self> {
        check_grid(height, width, labels, data.len())?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "unary at pixel {} label {} is not finite",
                pos / labels,
                pos % labels
            )));
        }
        Ok(UnaryField {
            height,
            width,
            labels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn pixel(&self, index: usize) -> &[T] {
        &self.data[index * self.labels..(index + 1) * self.labels]
    }
}

/// Hard per-pixel labels; [`IGNORE_LABEL`] marks unannotated pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    height: usize,
    width: usize,
    labels: usize,
    data: Vec<u8>,
}

impl LabelImage {
    pub fn new(height: usize, width: usize, labels: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        if labels == 0 || labels > IGNORE_LABEL as usize {
            return Err(Error::invalid(format!(
                "label count must be in 1..=255, got {labels}"
            )));
        }
        if let Some(pos) = data
            .iter()
            .position(|&v| v != IGNORE_LABEL && v as usize >= labels)
        {
            return Err(Error::invalid(format!(
                "pixel {pos} has label {} but only {labels} labels exist",
                data[pos]
            )));
        }
        Ok(LabelImage {
            height,
            width,
            labels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn has_ignored(&self) -> bool {
        self.data.contains(&IGNORE_LABEL)
    }
}

/// Learnable and fixed CRF parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams<T> {
    /// `[bilateral, spatial]` kernel weights, nonnegative.
    pub kernel_weights: [T; KERNELS],
    /// Row-major `labels x labels` compatibility `mu(l, l')`.
    pub compatibility: Vec<T>,
    pub labels: usize,
    /// Bilateral spatial bandwidth in pixels.
    pub theta_alpha: T,
    /// Bilateral color bandwidth in 0-255 intensity units.
    pub theta_beta: T,
    /// Spatial kernel bandwidth in pixels.
    pub theta_gamma: T,
    pub iterations: usize,
}

impl<T: Real> CrfParams<T> {
    pub const DEFAULT_BILATERAL_WEIGHT: f64 = 5.0;
    pub const DEFAULT_SPATIAL_WEIGHT: f64 = 3.0;
    pub const DEFAULT_THETA_ALPHA: f64 = 61.0;
    pub const DEFAULT_THETA_BETA: f64 = 11.0;
    pub const DEFAULT_THETA_GAMMA: f64 = 3.0;
    pub const DEFAULT_ITERATIONS: usize = 5;

    /// Default parameters with the Potts compatibility (0 on the diagonal, 1 elsewhere).
    pub fn potts(labels: usize) -> Self {
        let compatibility = (0..labels * labels)
            .map(|k| if k / labels == k % labels { T::zero() } else { T::one() })
            .collect();
        CrfParams {
            kernel_weights: [
                T::of(Self::DEFAULT_BILATERAL_WEIGHT),
                T::of(Self::DEFAULT_SPATIAL_WEIGHT),
            ],
            compatibility,
            labels,
            theta_alpha: T::of(Self::DEFAULT_THETA_ALPHA),
            theta_beta: T::of(Self::DEFAULT_THETA_BETA),
            theta_gamma: T::of(Self::DEFAULT_THETA_GAMMA),
            iterations: Self::DEFAULT_ITERATIONS,
        }
    }

    pub fn with_weights(mut self, bilateral: T, spatial: T) -> Self {
        self.kernel_weights = [bilateral, spatial];
        self
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    #[inline]
    pub fn compat(&self, label: usize, other: usize) -> T {
        self.compatibility[label * self.labels + other]
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels < 1 {
            return Err(Error::config("label count must be positive"));
        }
        if self.compatibility.len() != self.labels * self.labels {
            return Err(Error::config(format!(
                "compatibility has {} entries, expected {}",
                self.compatibility.len(),
                self.labels * self.labels
            )));
        }
        if self.kernel_weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
            return Err(Error::config("kernel weights must be finite and nonnegative"));
        }
        if self.compatibility.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("compatibility entries must be finite"));
        }
        for (name, theta) in [
            ("theta_alpha", self.theta_alpha),
            ("theta_beta", self.theta_beta),
            ("theta_gamma", self.theta_gamma),
        ] {
            if !(theta > T::zero()) || !theta.is_finite() {
                return Err(Error::config(format!("{name} must be positive, got {theta}")));
            }
        }
        if self.iterations < 1 {
            return Err(Error::config("mean-field iterations must be at least 1"));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> CrfParams<U> {
        let c = |v: T| U::of(v.as_f64());
        CrfParams {
            kernel_weights: [c(self.kernel_weights[0]), c(self.kernel_weights[1])],
            compatibility: self.compatibility.iter().map(|&v| c(v)).collect(),
            labels: self.labels,
            theta_alpha: c(self.theta_alpha),
            theta_beta: c(self.theta_beta),
            theta_gamma: c(self.theta_gamma),
            iterations: self.iterations,
        }
    }
}

fn check_grid(height: usize, width: usize, labels: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 || labels == 0 {
        return Err(Error::invalid(format!(
            "dimensions must be positive, got {height}x{width}x{labels}"
        )));
    }
    let expected = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(labels))
        .ok_or_else(|| Error::invalid("dimensions overflow"))?;
    if expected != len {
        return Err(Error::mismatch(format!(
            "{height}x{width}x{labels} grid needs {expected} values, got {len}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_invariants() {
        assert!(LabelDistributionImage::new(1, 1, 2, vec![0.5f64, 0.5]).is_ok());
        assert!(LabelDistributionImage::new(1, 1, 2, vec![0.6f64, 0.5]).is_err());
        assert!(LabelDistributionImage::new(1, 1, 2, vec![1.1f64, -0.1]).is_err());
        assert!(LabelDistributionImage::new(0, 1, 2, Vec::<f64>::new()).is_err());
        assert!(LabelDistributionImage::new(1, 2, 2, vec![0.5f64, 0.5]).is_err());
        let u = LabelDistributionImage::<f32>::uniform(2, 3, 4).unwrap();
        assert!(u.data().iter().all(|&p| p == 0.25));
    }

    #[test]
    fn label_image_range() {
        assert!(LabelImage::new(1, 3, 2, vec![0, 1, IGNORE_LABEL]).is_ok());
        assert!(LabelImage::new(1, 3, 2, vec![0, 2, 1]).is_err());
    }

    #[test]
    fn potts_defaults() {
        let p = CrfParams::<f64>::potts(3);
        assert_eq!(p.compat(0, 0), 0.0);
        assert_eq!(p.compat(0, 2), 1.0);
        assert_eq!(p.iterations, 5);
        assert_eq!(
            (p.theta_alpha, p.theta_beta, p.theta_gamma),
            (61.0, 11.0, 3.0)
        );
        p.validate().unwrap();
        assert!(p.clone().with_iterations(0).validate().is_err());
        assert!(p.with_weights(-1.0, 0.0).validate().is_err());
    }
}
