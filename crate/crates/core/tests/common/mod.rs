//! Shared helpers for the integration tests: a direct, loop-by-loop
//! mean-field implementation and random instance generators.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semfuse::crf::{CrfParams, LabelDistributionImage, UnaryField};
use semfuse::RgbImage;

pub struct Instance {
    pub rgb: RgbImage,
    pub unary: UnaryField<f64>,
    pub params: CrfParams<f64>,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rgb(h: usize, w: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let data = (0..h * w).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    RgbImage::new(h, w, data).unwrap()
}

pub fn random_distributions(h: usize, w: usize, labels: usize, rng: &mut ChaCha8Rng) -> LabelDistributionImage<f64> {
    let mut data = Vec::with_capacity(h * w * labels);
    for _ in 0..h * w {
        let raw: Vec<f64> = (0..labels).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / sum));
    }
    LabelDistributionImage::new(h, w, labels, data).unwrap()
}

/// Random image, log-probability unaries, nonnegative weights, a random
/// compatibility and bandwidths small enough that pixels interact strongly.
pub fn random_instance(h: usize, w: usize, labels: usize, iterations: usize, rng: &mut ChaCha8Rng) -> Instance {
    let rgb = random_rgb(h, w, rng);
    let unary: Vec<f64> = (0..h * w * labels).map(|_| rng.gen_range(-4.0..0.0)).collect();
    let mut params = CrfParams::potts(labels).with_iterations(iterations);
    params.kernel_weights = [rng.gen_range(0.5..6.0), rng.gen_range(0.5..4.0)];
    params.compatibility = (0..labels * labels).map(|_| rng.gen_range(-0.5..1.5)).collect();
    params.theta_alpha = rng.gen_range(1.0..4.0);
    params.theta_beta = rng.gen_range(20.0..80.0);
    params.theta_gamma = rng.gen_range(0.7..2.0);
    Instance {
        rgb,
        unary: UnaryField::new(h, w, labels, unary).unwrap(),
        params,
    }
}

/// Mean-field inference written out directly from the update equations,
/// with the two Gaussian kernels evaluated from pixel positions and colors.
pub fn reference_mean_field(inst: &Instance) -> Vec<f64> {
    let (h, w) = (inst.rgb.height(), inst.rgb.width());
    let n = h * w;
    let l = inst.unary.labels();
    let p = &inst.params;
    let u = inst.unary.data();

    let pos = |i: usize| ((i % w) as f64, (i / w) as f64);
    let mut kernels = vec![vec![0.0; n * n]; 2];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let ((xi, yi), (xj, yj)) = (pos(i), pos(j));
            let d2 = (xi - xj).powi(2) + (yi - yj).powi(2);
            let (ci, cj) = (inst.rgb.pixels()[i], inst.rgb.pixels()[j]);
            let c2: f64 = (0..3).map(|k| (ci[k] as f64 - cj[k] as f64).powi(2)).sum();
            kernels[0][i * n + j] =
                (-d2 / (2.0 * p.theta_alpha.powi(2)) - c2 / (2.0 * p.theta_beta.powi(2))).exp();
            kernels[1][i * n + j] = (-d2 / (2.0 * p.theta_gamma.powi(2))).exp();
        }
    }

    let softmax = |logits: &[f64]| -> Vec<f64> {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    };

    let mut q: Vec<f64> = (0..n).flat_map(|i| softmax(&u[i * l..(i + 1) * l])).collect();
    for _ in 0..p.iterations {
        let mut next = Vec::with_capacity(n * l);
        for i in 0..n {
            let mut weighted = vec![0.0; l];
            for (m, k) in kernels.iter().enumerate() {
                let norm: f64 = (0..n).map(|j| k[i * n + j]).sum();
                for lab in 0..l {
                    let msg: f64 = (0..n).map(|j| k[i * n + j] * q[j * l + lab]).sum::<f64>() / norm;
                    weighted[lab] += p.kernel_weights[m] * msg;
                }
            }
            let logits: Vec<f64> = (0..l)
                .map(|a| {
                    let pairwise: f64 = (0..l).map(|b| p.compatibility[a * l + b] * weighted[b]).sum();
                    u[i * l + a] - pairwise
                })
                .collect();
            next.extend(softmax(&logits));
        }
        q = next;
    }
    q
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Analytic and central-difference gradients of `sum(c * Q_final)` for a
/// fixed random weighting `c`, flattened as `(dU, dw, dmu)`.
pub struct GradientComparison {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradientComparison {
    /// Largest `|a - n| / max(|a|, |n|, floor)` over all components.
    pub fn max_relative_error(&self, floor: f64) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

pub fn compare_gradients(inst: &Instance, h: f64, rng: &mut ChaCha8Rng) -> GradientComparison {
    use semfuse::crf::{build_features, mean_field_backward, mean_field_infer};
    use semfuse::filtering::Backend;

    let plans = build_features(&inst.rgb, &inst.params)
        .unwrap()
        .plan(Backend::Exact)
        .unwrap();
    let weights: Vec<f64> = (0..inst.unary.data().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |unary: &UnaryField<f64>, params: &CrfParams<f64>| -> f64 {
        let (q, _) = mean_field_infer(unary, &plans, params, false).unwrap();
        q.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
    };

    let (_, trace) = mean_field_infer(&inst.unary, &plans, &inst.params, true).unwrap();
    let g = mean_field_backward(&trace, &plans, &inst.params, &weights).unwrap();
    let mut analytic = g.unary.clone();
    analytic.extend_from_slice(&g.kernel_weights);
    analytic.extend_from_slice(&g.compatibility);

    let (hh, ww, l) = (inst.unary.height(), inst.unary.width(), inst.unary.labels());
    let mut numeric = Vec::with_capacity(analytic.len());
    for k in 0..inst.unary.data().len() {
        let shifted = |d: f64| {
            let mut u = inst.unary.data().to_vec();
            u[k] += d;
            UnaryField::new(hh, ww, l, u).unwrap()
        };
        numeric.push((loss(&shifted(h), &inst.params) - loss(&shifted(-h), &inst.params)) / (2.0 * h));
    }
    for m in 0..2 {
        let shifted = |d: f64| {
            let mut p = inst.params.clone();
            p.kernel_weights[m] += d;
            p
        };
        numeric.push((loss(&inst.unary, &shifted(h)) - loss(&inst.unary, &shifted(-h))) / (2.0 * h));
    }
    for k in 0..l * l {
        let shifted = |d: f64| {
            let mut p = inst.params.clone();
            p.compatibility[k] += d;
            p
        };
        numeric.push((loss(&inst.unary, &shifted(h)) - loss(&inst.unary, &shifted(-h))) / (2.0 * h));
    }
    GradientComparison { analytic, numeric }
}
