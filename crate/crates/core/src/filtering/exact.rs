use crate::scalar::Real;

use super::gaussian_kernel;

/// Literal pairwise evaluation; the kernel is recomputed on every call so
/// memory stays O(N d).
pub(super) struct ExactKernel<T: Real> {
    features: Vec<T>,
    dim: usize,
}

impl<T: Real> ExactKernel<T> {
    pub(super) fn new(features: &[T], dim: usize) -> Self {
        ExactKernel {
            features: features.to_vec(),
            dim,
        }
    }

    /// `out_i = sum_{j != i} k_ij v_j`. The kernel matrix is symmetric, so the
    /// same routine serves as its own transpose.
    pub(super) fn apply(&self, values: &[T], channels: usize) -> Vec<T> {
        let n = self.features.len() / self.dim;
        let mut out = vec![T::zero(); n * channels];
        for i in 0..n {
            let fi = &self.features[i * self.dim..(i + 1) * self.dim];
            let vi = &values[i * channels..(i + 1) * channels];
            let (head, tail) = out.split_at_mut((i + 1) * channels);
            let out_i = &mut head[i * channels..];
            let rest = tail
                .chunks_exact_mut(channels)
                .zip(values[(i + 1) * channels..].chunks_exact(channels))
                .zip(self.features[(i + 1) * self.dim..].chunks_exact(self.dim));
            for ((out_j, vj), fj) in rest {
                let k = gaussian_kernel(fi, fj);
                for (((oi, &a), oj), &b) in out_i.iter_mut().zip(vi).zip(out_j.iter_mut()).zip(vj) {
                    *oi += k * b;
                    *oj += k * a;
                }
            }
        }
        out
    }
}
