use crate::error::{Error, Result};
use crate::filtering::gaussian_kernel;
use crate::scalar::Real;

use super::{CrfParams, FeatureField, LabelImage, UnaryField, IGNORE_LABEL};

/// Enumeration budget for [`brute_force_map`]: `L^N <= 2^20` labelings.
pub const BRUTE_FORCE_LIMIT: u64 = 1 << 20;

fn check_inputs<T: Real>(unary: &UnaryField<T>, features: &FeatureField<T>, params: &CrfParams<T>) -> Result<()> {
    params.validate()?;
    if features.height != unary.height() || features.width != unary.width() {
        return Err(Error::mismatch(format!(
            "features cover {}x{} pixels, unary field is {}x{}",
            features.height,
            features.width,
            unary.height(),
            unary.width()
        )));
    }
    if params.labels != unary.labels() {
        return Err(Error::mismatch(format!(
            "parameters are for {} labels, unary field has {}",
            params.labels,
            unary.labels()
        )));
    }
    Ok(())
}

/// Weighted, unnormalized pairwise kernel `sum_m w_m k_m(f_i, f_j)`.
fn pair_weight<T: Real>(features: &FeatureField<T>, params: &CrfParams<T>, i: usize, j: usize) -> T {
    let [w0, w1] = params.kernel_weights;
    let mut k = T::zero();
    if w0 != T::zero() {
        k += w0 * gaussian_kernel(features.bilateral_at(i), features.bilateral_at(j));
    }
    if w1 != T::zero() {
        k += w1 * gaussian_kernel(features.spatial_at(i), features.spatial_at(j));
    }
    k
}

fn pair_table<T: Real>(features: &FeatureField<T>, params: &CrfParams<T>) -> Vec<T> {
    let n = features.pixel_count();
    let mut table = vec![T::zero(); n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            table[i * n + j] = pair_weight(features, params, i, j);
        }
    }
    table
}

fn energy_with_table<T: Real>(labels: &[u8], unary: &UnaryField<T>, params: &CrfParams<T>, table: &[T]) -> T {
    let n = labels.len();
    let mut e = T::zero();
    for (i, &x) in labels.iter().enumerate() {
        e -= unary.pixel(i)[x as usize];
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let mu = params.compat(labels[i] as usize, labels[j] as usize);
            if mu != T::zero() {
                e += mu * table[i * n + j];
            }
        }
    }
    e
}

/// Exact Gibbs energy `sum_i -U_i(x_i) + sum_{i<j} mu(x_i, x_j) sum_m w_m k_m(f_i, f_j)`.
///
/// Quadratic in the pixel count; meant for diagnostics and tiny instances.
pub fn crf_energy<T: Real>(
    labeling: &LabelImage,
    unary: &UnaryField<T>,
    features: &FeatureField<T>,
    params: &CrfParams<T>,
) -> Result<T> {
    check_inputs(unary, features, params)?;
    if labeling.height() != unary.height() || labeling.width() != unary.width() {
        return Err(Error::mismatch("labeling and unary field differ in size"));
    }
    if labeling.has_ignored() {
        return Err(Error::invalid("energy is undefined for ignored pixels"));
    }
    if labeling.data().iter().any(|&x| x as usize >= unary.labels()) {
        return Err(Error::invalid("labeling uses labels outside the unary field"));
    }
    let x = labeling.data();
    let n = x.len();
    let mut e = T::zero();
    for (i, &xi) in x.iter().enumerate() {
        e -= unary.pixel(i)[xi as usize];
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let mu = params.compat(x[i] as usize, x[j] as usize);
            if mu != T::zero() {
                e += mu * pair_weight(features, params, i, j);
            }
        }
    }
    Ok(e)
}

/// Minimum-energy labeling by exhaustive enumeration.
///
/// Labelings are visited in lexicographic order (pixel 0 most significant) and
/// only a strictly lower energy replaces the incumbent, so ties resolve to the
/// lexicographically smallest labeling.
pub fn brute_force_map<T: Real>(
    unary: &UnaryField<T>,
    features: &FeatureField<T>,
    params: &CrfParams<T>,
) -> Result<LabelImage> {
    check_inputs(unary, features, params)?;
    let n = unary.pixel_count();
    let labels = unary.labels();
    let too_large = || {
        Error::TooLarge(format!(
            "{labels}^{n} labelings exceed the enumeration limit of {BRUTE_FORCE_LIMIT}"
        ))
    };
    let count = u32::try_from(n)
        .ok()
        .and_then(|n| (labels as u64).checked_pow(n))
        .ok_or_else(too_large)?;
    if count > BRUTE_FORCE_LIMIT {
        return Err(too_large());
    }
    if labels > IGNORE_LABEL as usize {
        return Err(Error::invalid("too many labels for a label image"));
    }

    let table = pair_table(features, params);
    let mut current = vec![0u8; n];
    let mut best = current.clone();
    let mut best_energy = energy_with_table(&current, unary, params, &table);
    for _ in 1..count {
        // odometer increment, last pixel fastest
        for digit in current.iter_mut().rev() {
            *digit += 1;
            if (*digit as usize) < labels {
                break;
            }
            *digit = 0;
        }
        let e = energy_with_table(&current, unary, params, &table);
        if e < best_energy {
            best_energy = e;
            best.copy_from_slice(&current);
        }
    }
    LabelImage::new(unary.height(), unary.width(), labels, best)
}
