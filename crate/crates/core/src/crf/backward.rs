//! Reverse-mode differentiation through the unrolled mean-field iterations.

use crate::error::{Error, Result};
use crate::scalar::Real;

use super::{CrfParams, KernelPlans, Trace, KERNELS};

/// Loss gradients with respect to the CRF inputs and learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    /// `N x L`, matching the unary field layout.
    pub unary: Vec<T>,
    pub kernel_weights: [T; KERNELS],
    /// Row-major `L x L`.
    pub compatibility: Vec<T>,
}

/// Adds the softmax vector-Jacobian product `q * (g - <q, g>)` into `out`.
fn softmax_vjp<T: Real>(q: &[T], g: &[T], labels: usize, out: &mut [T]) {
    for ((qi, gi), oi) in q
        .chunks_exact(labels)
        .zip(g.chunks_exact(labels))
        .zip(out.chunks_exact_mut(labels))
    {
        let dot: T = qi.iter().zip(gi).map(|(&a, &b)| a * b).sum();
        for l in 0..labels {
            oi[l] = qi[l] * (gi[l] - dot);
        }
    }
}

/// Back-propagates `d_final = dLoss/dQ_T` through every iteration in `trace`.
///
/// Kernel normalizers depend only on the features and are constants here.
/// The shared parameters accumulate their gradient over all iterations.
pub fn mean_field_backward<T: Real>(
    trace: &Trace<T>,
    plans: &KernelPlans<T>,
    params: &CrfParams<T>,
    d_final: &[T],
) -> Result<Gradients<T>> {
    let labels = trace.labels;
    let n = trace.pixel_count();
    if trace.marginals.len() != trace.weighted.len() + 1 || trace.weighted.is_empty() {
        return Err(Error::invalid(
            "trace holds no cached iterations; run inference with tracing enabled",
        ));
    }
    if trace.iterations() != params.iterations || params.labels != labels {
        return Err(Error::mismatch(format!(
            "trace has {} iterations over {labels} labels, parameters have {} over {}",
            trace.iterations(),
            params.iterations,
            params.labels
        )));
    }
    if plans.height() != trace.height || plans.width() != trace.width {
        return Err(Error::mismatch("kernel plans do not match the traced image"));
    }
    if d_final.len() != n * labels {
        return Err(Error::mismatch(format!(
            "loss gradient has {} entries, expected {}",
            d_final.len(),
            n * labels
        )));
    }

    let mut d_unary = vec![T::zero(); n * labels];
    let mut d_weights = [T::zero(); KERNELS];
    let mut d_compat = vec![T::zero(); labels * labels];

    let mut grad = d_final.to_vec();
    let mut d_logits = vec![T::zero(); n * labels];
    let mut d_weighted = vec![T::zero(); n * labels];

    for t in (0..trace.iterations()).rev() {
        softmax_vjp(&trace.marginals[t + 1], &grad, labels, &mut d_logits);
        for (du, &dl) in d_unary.iter_mut().zip(&d_logits) {
            *du += dl;
        }

        // logits = U - mu * weighted, so d(penalty) = -d_logits.
        let weighted = &trace.weighted[t];
        for i in 0..n {
            let dl = &d_logits[i * labels..(i + 1) * labels];
            let wv = &weighted[i * labels..(i + 1) * labels];
            let dw = &mut d_weighted[i * labels..(i + 1) * labels];
            dw.iter_mut().for_each(|v| *v = T::zero());
            for l in 0..labels {
                let dp = -dl[l];
                if dp == T::zero() {
                    continue;
                }
                for lp in 0..labels {
                    d_compat[l * labels + lp] += dp * wv[lp];
                    dw[lp] += params.compat(l, lp) * dp;
                }
            }
        }

        for (m, dwm) in d_weights.iter_mut().enumerate() {
            *dwm += d_weighted
                .iter()
                .zip(&trace.messages[t][m])
                .map(|(&a, &b)| a * b)
                .sum::<T>();
        }

        let mut prev = vec![T::zero(); n * labels];
        for m in 0..KERNELS {
            let w = params.kernel_weights[m];
            if w == T::zero() {
                continue;
            }
            let back = plans.kernel(m).apply_transpose(&d_weighted, labels)?;
            for (p, &b) in prev.iter_mut().zip(&back) {
                *p += w * b;
            }
        }
        grad = prev;
    }

    // Initialization Q0 = softmax(U).
    softmax_vjp(&trace.marginals[0], &grad, labels, &mut d_logits);
    for (du, &dl) in d_unary.iter_mut().zip(&d_logits) {
        *du += dl;
    }

    Ok(Gradients {
        unary: d_unary,
        kernel_weights: d_weights,
        compatibility: d_compat,
    })
}
