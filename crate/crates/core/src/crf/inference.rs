use crate::error::{Error, Result};
use crate::filtering::{Backend, FilterPlan};
use crate::raster::RgbImage;
use crate::scalar::Real;

use super::{
    CrfParams, LabelDistributionImage, LabelImage, UnaryField, KERNELS, PROBABILITY_FLOOR,
};

/// `U_i(l) = log(max(p_i(l), 1e-8))`, so that a softmax recovers the input.
pub fn unary_from_probabilities<T: Real>(probs: &LabelDistributionImage<T>) -> Result<UnaryField<T>> {
    let floor = T::of(PROBABILITY_FLOOR);
    let data = probs.data().iter().map(|&p| p.max(floor).ln()).collect();
    UnaryField::new(probs.height(), probs.width(), probs.labels(), data)
}

/// Numerically stable in-place softmax of one logit vector.
pub fn softmax_in_place<T: Real>(logits: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Per-pixel kernel features, already divided by the bandwidths.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField<T> {
    pub height: usize,
    pub width: usize,
    /// `N x 5`: `(x / theta_alpha, y / theta_alpha, r / theta_beta, g / theta_beta, b / theta_beta)`.
    pub bilateral: Vec<T>,
    /// `N x 2`: `(x / theta_gamma, y / theta_gamma)`.
    pub spatial: Vec<T>,
}

impl<T: Real> FeatureField<T> {
    pub const BILATERAL_DIM: usize = 5;
    pub const SPATIAL_DIM: usize = 2;

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn bilateral_at(&self, pixel: usize) -> &[T] {
        &self.bilateral[pixel * Self::BILATERAL_DIM..(pixel + 1) * Self::BILATERAL_DIM]
    }

    pub fn spatial_at(&self, pixel: usize) -> &[T] {
        &self.spatial[pixel * Self::SPATIAL_DIM..(pixel + 1) * Self::SPATIAL_DIM]
    }

    /// Builds one filter plan per kernel.
    pub fn plan(&self, backend: Backend) -> Result<KernelPlans<T>> {
        Ok(KernelPlans {
            height: self.height,
            width: self.width,
            plans: [
                FilterPlan::new(&self.bilateral, Self::BILATERAL_DIM, backend)?,
                FilterPlan::new(&self.spatial, Self::SPATIAL_DIM, backend)?,
            ],
        })
    }
}

/// Filter plans for the bilateral and spatial kernels of one image.
#[derive(Debug)]
pub struct KernelPlans<T: Real> {
    height: usize,
    width: usize,
    plans: [FilterPlan<T>; KERNELS],
}

impl<T: Real> KernelPlans<T> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn kernel(&self, m: usize) -> &FilterPlan<T> {
        &self.plans[m]
    }
}

/// Pixel coordinates are `(column, row)` in pixels, colors in 0..=255.
pub fn build_features<T: Real>(rgb: &RgbImage, params: &CrfParams<T>) -> Result<FeatureField<T>> {
    params.validate()?;
    let (h, w) = (rgb.height(), rgb.width());
    let mut bilateral = Vec::with_capacity(h * w * 5);
    let mut spatial = Vec::with_capacity(h * w * 2);
    for row in 0..h {
        for col in 0..w {
            let (x, y) = (T::of(col as f64), T::of(row as f64));
            let [r, g, b] = rgb.get(row, col).map(|c| T::of(c as f64));
            bilateral.extend_from_slice(&[
                x / params.theta_alpha,
                y / params.theta_alpha,
                r / params.theta_beta,
                g / params.theta_beta,
                b / params.theta_beta,
            ]);
            spatial.extend_from_slice(&[x / params.theta_gamma, y / params.theta_gamma]);
        }
    }
    Ok(FeatureField {
        height: h,
        width: w,
        bilateral,
        spatial,
    })
}

/// Intermediates of an unrolled inference, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub(crate) height: usize,
    pub(crate) width: usize,
    pub(crate) labels: usize,
    /// `T + 1` marginals, starting with `softmax(U)`.
    pub(crate) marginals: Vec<Vec<T>>,
    /// Per iteration, the normalized messages of each kernel.
    pub(crate) messages: Vec<[Vec<T>; KERNELS]>,
    /// Per iteration, the weighted sum of messages.
    pub(crate) weighted: Vec<Vec<T>>,
}

impl<T: Real> Trace<T> {
    pub fn iterations(&self) -> usize {
        self.weighted.len()
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn final_marginals(&self) -> LabelDistributionImage<T> {
        LabelDistributionImage::from_normalized(
            self.height,
            self.width,
            self.labels,
            self.marginals.last().cloned().unwrap_or_default(),
        )
    }
}

struct StepOutput<T> {
    marginals: Vec<T>,
    messages: [Vec<T>; KERNELS],
    weighted: Vec<T>,
}

fn check_consistent<T: Real>(
    labels: usize,
    height: usize,
    width: usize,
    unary: &UnaryField<T>,
    plans: &KernelPlans<T>,
    params: &CrfParams<T>,
) -> Result<()> {
    params.validate()?;
    if unary.height() != height || unary.width() != width || unary.labels() != labels {
        return Err(Error::mismatch(format!(
            "unary field is {}x{}x{}, marginals are {height}x{width}x{labels}",
            unary.height(),
            unary.width(),
            unary.labels()
        )));
    }
    if plans.height() != height || plans.width() != width {
        return Err(Error::mismatch(format!(
            "kernel plans cover {}x{} pixels, image is {height}x{width}",
            plans.height(),
            plans.width()
        )));
    }
    if params.labels != labels {
        return Err(Error::mismatch(format!(
            "parameters are for {} labels, image has {labels}",
            params.labels
        )));
    }
    Ok(())
}

fn step_raw<T: Real>(
    q: &[T],
    unary: &UnaryField<T>,
    plans: &KernelPlans<T>,
    params: &CrfParams<T>,
    iteration: usize,
) -> Result<StepOutput<T>> {
    let labels = params.labels;
    let n = plans.pixel_count();

    // Message passing, one filter per kernel.
    let messages = [
        plans.kernel(0).apply(q, labels)?,
        plans.kernel(1).apply(q, labels)?,
    ];

    // Weighting filter outputs.
    let [w0, w1] = params.kernel_weights;
    let weighted: Vec<T> = messages[0]
        .iter()
        .zip(&messages[1])
        .map(|(&a, &b)| w0 * a + w1 * b)
        .collect();

    // Compatibility transform, adding unaries, normalizing.
    let mut marginals = vec![T::zero(); n * labels];
    for i in 0..n {
        let checked = &weighted[i * labels..(i + 1) * labels];
        let out = &mut marginals[i * labels..(i + 1) * labels];
        let u = unary.pixel(i);
        for l in 0..labels {
            let penalty: T = checked
                .iter()
                .enumerate()
                .map(|(lp, &v)| params.compat(l, lp) * v)
                .sum();
            let logit = u[l] - penalty;
            if !logit.is_finite() {
                return Err(Error::Numerical {
                    stage: "unary addition",
                    iteration,
                    pixel: i,
                    label: l,
                });
            }
            out[l] = logit;
        }
        softmax_in_place(out);
        if let Some(l) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                stage: "normalization",
                iteration,
                pixel: i,
                label: l,
            });
        }
    }
    Ok(StepOutput {
        marginals,
        messages,
        weighted,
    })
}

/// One mean-field update: message passing, weighting, compatibility
/// transform, unary addition and softmax normalization.
pub fn mean_field_step<T: Real>(
    q: &LabelDistributionImage<T>,
    unary: &UnaryField<T>,
    plans: &KernelPlans<T>,
    params: &CrfParams<T>,
) -> Result<LabelDistributionImage<T>> {
    check_consistent(q.labels(), q.height(), q.width(), unary, plans, params)?;
    let out = step_raw(q.data(), unary, plans, params, 1)?;
    Ok(LabelDistributionImage::from_normalized(
        q.height(),
        q.width(),
        q.labels(),
        out.marginals,
    ))
}

fn initial_marginals<T: Real>(unary: &UnaryField<T>) -> Vec<T> {
    let mut q = unary.data().to_vec();
    for dist in q.chunks_exact_mut(unary.labels()) {
        softmax_in_place(dist);
    }
    q
}

/// Runs `params.iterations` mean-field steps from `softmax(U)`.
///
/// The returned trace is empty unless `keep_trace` is set; the backward pass
/// needs a full trace.
pub fn mean_field_infer<T: Real>(
    unary: &UnaryField<T>,
    plans: &KernelPlans<T>,
    params: &CrfParams<T>,
    keep_trace: bool,
) -> Result<(LabelDistributionImage<T>, Trace<T>)> {
    let (h, w, labels) = (unary.height(), unary.width(), unary.labels());
    check_consistent(labels, h, w, unary, plans, params)?;
    let mut trace = Trace {
        height: h,
        width: w,
        labels,
        marginals: Vec::new(),
        messages: Vec::new(),
        weighted: Vec::new(),
    };
    let mut q = initial_marginals(unary);
    for iteration in 1..=params.iterations {
        let step = step_raw(&q, unary, plans, params, iteration)?;
        let next = step.marginals;
        if keep_trace {
            trace.marginals.push(std::mem::replace(&mut q, next));
            trace.messages.push(step.messages);
            trace.weighted.push(step.weighted);
        } else {
            q = next;
        }
    }
    if keep_trace {
        trace.marginals.push(q.clone());
    }
    Ok((LabelDistributionImage::from_normalized(h, w, labels, q), trace))
}

/// Per-pixel argmax; ties go to the smallest label id.
pub fn map_labeling<T: Real>(q: &LabelDistributionImage<T>) -> LabelImage {
    let data = q
        .pixels()
        .map(|dist| argmax_of(dist) as u8)
        .collect::<Vec<_>>();
    LabelImage::new(q.height(), q.width(), q.labels(), data)
        .expect("marginal dimensions are valid label image dimensions")
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax_of<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
