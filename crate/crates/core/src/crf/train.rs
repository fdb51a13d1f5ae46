//! Gradient-descent fitting of kernel weights and label compatibilities.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filtering::Backend;
use crate::raster::RgbImage;
use crate::scalar::Real;

use super::{
    build_features, mean_field_backward, mean_field_infer, unary_from_probabilities, CrfParams,
    KernelPlans, LabelDistributionImage, LabelImage, UnaryField, IGNORE_LABEL, PROBABILITY_FLOOR,
};

/// One training image: color, unary probabilities and annotation.
#[derive(Debug, Clone)]
pub struct TrainingSample<T> {
    pub rgb: RgbImage,
    pub probs: LabelDistributionImage<T>,
    pub truth: LabelImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub backend: Backend,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            epochs: 10,
            seed: 0,
            backend: Backend::Lattice,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters with the lowest training loss seen, initial ones included.
    pub params: CrfParams<T>,
    /// Training loss before the first epoch and after each epoch.
    pub losses: Vec<f64>,
    pub best_loss: f64,
}

/// Mean per-pixel cross-entropy over annotated pixels and its gradient with
/// respect to the marginals. Returns `None` when every pixel is ignored.
pub fn cross_entropy<T: Real>(q: &LabelDistributionImage<T>, truth: &LabelImage) -> Option<(f64, Vec<T>)> {
    let labels = q.labels();
    let valid = truth.data().iter().filter(|&&t| t != IGNORE_LABEL).count();
    if valid == 0 {
        return None;
    }
    let floor = T::of(PROBABILITY_FLOOR);
    let scale = T::one() / T::of(valid as f64);
    let mut grad = vec![T::zero(); q.data().len()];
    let mut loss = 0.0;
    for (i, &t) in truth.data().iter().enumerate() {
        if t == IGNORE_LABEL {
            continue;
        }
        let p = q.pixel(i)[t as usize];
        loss -= p.max(floor).ln().as_f64();
        if p > floor {
            grad[i * labels + t as usize] = -scale / p;
        }
    }
    Some((loss / valid as f64, grad))
}

struct Prepared<T: Real> {
    unary: UnaryField<T>,
    plans: KernelPlans<T>,
    truth: LabelImage,
}

fn dataset_loss<T: Real>(data: &[Prepared<T>], params: &CrfParams<T>) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for sample in data {
        let (q, _) = mean_field_infer(&sample.unary, &sample.plans, params, false)?;
        if let Some((loss, _)) = cross_entropy(&q, &sample.truth) {
            total += loss;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Learns kernel weights and the compatibility matrix by per-image gradient
/// descent on the cross-entropy of the final marginals. Bandwidths stay fixed.
///
/// Images are visited in a seeded shuffled order each epoch; weights are
/// projected back onto `w >= 0` after every update.
pub fn train_crf_params<T: Real>(
    dataset: &[TrainingSample<T>],
    init: &CrfParams<T>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    init.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if !(config.learning_rate > 0.0) || !config.learning_rate.is_finite() {
        return Err(Error::config(format!(
            "learning rate must be positive, got {}",
            config.learning_rate
        )));
    }

    let mut prepared = Vec::with_capacity(dataset.len());
    for (k, sample) in dataset.iter().enumerate() {
        let labels = sample.probs.labels();
        if labels != init.labels || sample.truth.labels() != init.labels {
            return Err(Error::mismatch(format!(
                "sample {k} has {labels} labels, parameters have {}",
                init.labels
            )));
        }
        let (h, w) = (sample.probs.height(), sample.probs.width());
        if sample.rgb.height() != h
            || sample.rgb.width() != w
            || sample.truth.height() != h
            || sample.truth.width() != w
        {
            return Err(Error::mismatch(format!("sample {k}: image sizes differ")));
        }
        let unary = unary_from_probabilities(&sample.probs)?;
        let plans = build_features(&sample.rgb, init)?.plan(config.backend)?;
        prepared.push(Prepared {
            unary,
            plans,
            truth: sample.truth.clone(),
        });
    }

    let mut params = init.clone();
    let initial_loss = dataset_loss(&prepared, &params)?;
    let mut losses = vec![initial_loss];
    let mut best = (initial_loss, params.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lr = T::of(config.learning_rate);
    let mut order: Vec<usize> = (0..prepared.len()).collect();

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &k in &order {
            let sample = &prepared[k];
            let (q, trace) = mean_field_infer(&sample.unary, &sample.plans, &params, true)?;
            let Some((_, d_q)) = cross_entropy(&q, &sample.truth) else {
                continue;
            };
            let grads = mean_field_backward(&trace, &sample.plans, &params, &d_q)?;
            for (w, g) in params.kernel_weights.iter_mut().zip(grads.kernel_weights) {
                *w = (*w - lr * g).max(T::zero());
            }
            for (mu, g) in params.compatibility.iter_mut().zip(&grads.compatibility) {
                *mu -= lr * *g;
            }
        }
        let loss = dataset_loss(&prepared, &params)?;
        losses.push(loss);
        if loss < best.0 {
            best = (loss, params.clone());
        }
    }

    Ok(TrainOutcome {
        params: best.1,
        losses,
        best_loss: best.0,
    })
}
