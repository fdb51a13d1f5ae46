//! High-dimensional Gaussian filtering of per-point vector fields.
//!
//! Both backends evaluate the normalized, self-excluded message
//!
//! ```text
//! out_i = sum_{j != i} k(f_i, f_j) v_j / d_i,    d_i = sum_{j != i} k(f_i, f_j)
//! ```
//!
//! with `k(a, b) = exp(-|a - b|^2 / 2)` over features that the caller has
//! already divided by the kernel bandwidths. The exact backend evaluates the
//! double sum literally. The lattice backend splats onto a permutohedral
//! lattice, blurs along each lattice axis and slices back, which is linear in
//! the values and close to linear in the point count.

mod exact;
mod hash;
mod lattice;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Real;

use exact::ExactKernel;
use lattice::Lattice;

/// Filtering algorithm behind a [`FilterPlan`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    /// Literal O(N^2) double sum. Intended for N up to a few thousand points.
    Exact,
    /// Permutohedral lattice approximation.
    #[default]
    Lattice,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backend::Exact => f.write_str("exact"),
            Backend::Lattice => f.write_str("lattice"),
        }
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exact" => Ok(Backend::Exact),
            "lattice" => Ok(Backend::Lattice),
            other => Err(Error::config(format!(
                "unknown filter backend `{other}` (expected exact|lattice)"
            ))),
        }
    }
}

/// Unnormalized Gaussian kernel `exp(-|a - b|^2 / 2)`.
#[inline]
pub fn gaussian_kernel<T: Real>(a: &[T], b: &[T]) -> T {
    let half = T::of(0.5);
    let sq: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    (-half * sq).exp()
}

/// Lattice points whose off-diagonal mass is below this fraction of their
/// self weight are treated as having no neighbors.
const ISOLATION_RATIO: f64 = 1e-4;

enum Kind<T: Real> {
    Exact(ExactKernel<T>),
    Lattice(Lattice<T>),
}

/// Precomputed filtering structure for one feature set.
///
/// A plan is immutable once built. It can be shared between threads and
/// applied to any number of value fields with any channel count.
pub struct FilterPlan<T: Real> {
    dim: usize,
    len: usize,
    backend: Backend,
    kind: Kind<T>,
    normalizers: Vec<T>,
    /// Points with no neighborhood mass: unit normalizer, zero message.
    isolated: Vec<bool>,
}

impl<T: Real> fmt::Debug for FilterPlan<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FilterPlan")
            .field("dim", &self.dim)
            .field("len", &self.len)
            .field("backend", &self.backend)
            .finish_non_exhaustive()
    }
}

impl<T: Real> FilterPlan<T> {
    /// Builds a plan for `features`, a row-major `len x dim` array.
    pub fn new(features: &[T], dim: usize, backend: Backend) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        if features.is_empty() || features.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "feature buffer of length {} is not a nonempty multiple of dimension {dim}",
                features.len()
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite feature at point {}, component {}",
                pos / dim,
                pos % dim
            )));
        }
        let len = features.len() / dim;
        let kind = match backend {
            Backend::Exact => Kind::Exact(ExactKernel::new(features, dim)),
            Backend::Lattice => Kind::Lattice(Lattice::new(features, dim)),
        };
        let mut plan = FilterPlan {
            dim,
            len,
            backend,
            kind,
            normalizers: Vec::new(),
            isolated: Vec::new(),
        };
        let ones = vec![T::one(); len];
        let sums = plan.raw(&ones, 1, false);
        plan.isolated = match &plan.kind {
            Kind::Exact(_) => sums.iter().map(|&d| !(d > T::zero())).collect(),
            // The lattice subtracts its own diagonal; a remainder within
            // rounding of that diagonal carries no usable neighborhood.
            Kind::Lattice(lattice) => sums
                .iter()
                .zip(lattice.self_weights())
                .map(|(&d, &s)| !(d > T::of(ISOLATION_RATIO) * s))
                .collect(),
        };
        plan.normalizers = sums
            .into_iter()
            .zip(&plan.isolated)
            .map(|(d, &isolated)| if isolated { T::one() } else { d })
            .collect();
        Ok(plan)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    /// Per-point normalizers `d_i`; strictly positive.
    pub fn normalizers(&self) -> &[T] {
        &self.normalizers
    }

    /// Normalized, self-excluded messages for a row-major `len x channels` field.
    pub fn apply(&self, values: &[T], channels: usize) -> Result<Vec<T>> {
        self.check(values, channels)?;
        let mut out = self.raw(values, channels, false);
        for ((row, &d), &isolated) in out
            .chunks_exact_mut(channels)
            .zip(&self.normalizers)
            .zip(&self.isolated)
        {
            for v in row {
                *v = if isolated { T::zero() } else { *v / d };
            }
        }
        Ok(out)
    }

    /// Adjoint of [`FilterPlan::apply`] with the normalizers held fixed.
    pub fn apply_transpose(&self, values: &[T], channels: usize) -> Result<Vec<T>> {
        self.check(values, channels)?;
        let mut scaled = values.to_vec();
        for ((row, &d), &isolated) in scaled
            .chunks_exact_mut(channels)
            .zip(&self.normalizers)
            .zip(&self.isolated)
        {
            for v in row {
                *v = if isolated { T::zero() } else { *v / d };
            }
        }
        Ok(self.raw(&scaled, channels, true))
    }

    /// Self-excluded kernel sum without normalization, `sum_{j != i} k_ij v_j`.
    pub fn apply_raw(&self, values: &[T], channels: usize) -> Result<Vec<T>> {
        self.check(values, channels)?;
        Ok(self.raw(values, channels, false))
    }

    fn check(&self, values: &[T], channels: usize) -> Result<()> {
        if channels == 0 {
            return Err(Error::invalid("value field needs at least one channel"));
        }
        if values.len() != self.len * channels {
            return Err(Error::mismatch(format!(
                "value field has {} entries, plan expects {} points x {channels} channels",
                values.len(),
                self.len
            )));
        }
        Ok(())
    }

    fn raw(&self, values: &[T], channels: usize, transpose: bool) -> Vec<T> {
        match &self.kind {
            Kind::Exact(kernel) => kernel.apply(values, channels),
            Kind::Lattice(lattice) => lattice.apply(values, channels, transpose),
        }
    }
}
