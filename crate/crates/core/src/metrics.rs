//! Confusion matrices and the four standard segmentation scores.

use std::fmt::Write as _;

use crate::crf::{LabelImage, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::fusion::VoxelMap;
use crate::projection::{back_project, CameraIntrinsics, Pose};
use crate::raster::DepthImage;

/// `counts[truth * labels + predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    labels: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(labels: usize) -> Self {
        ConfusionMatrix {
            labels,
            counts: vec![0; labels * labels],
        }
    }

    /// Row-major counts, truth along rows.
    pub fn from_counts(labels: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != labels * labels {
            return Err(Error::mismatch(format!(
                "{labels} labels need {} counts, got {}",
                labels * labels,
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { labels, counts })
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.labels + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn record(&mut self, truth: u8, predicted: u8) {
        self.counts[truth as usize * self.labels + predicted as usize] += 1;
    }

    /// Adds one pixel pair per annotated truth pixel. Annotated pixels
    /// predicted as the ignore value are skipped and counted; the count is
    /// returned.
    pub fn accumulate(&mut self, predicted: &LabelImage, truth: &LabelImage) -> Result<u64> {
        if predicted.height() != truth.height() || predicted.width() != truth.width() {
            return Err(Error::mismatch(format!(
                "prediction is {}x{}, truth {}x{}",
                predicted.height(),
                predicted.width(),
                truth.height(),
                truth.width()
            )));
        }
        let pairs = || predicted.data().iter().zip(truth.data()).filter(|(_, &t)| t != IGNORE_LABEL);
        for (i, (&p, &t)) in pairs().enumerate() {
            if t as usize >= self.labels || (p != IGNORE_LABEL && p as usize >= self.labels) {
                return Err(Error::invalid(format!(
                    "annotated pixel {i}: labels (truth {t}, predicted {p}) outside 0..{}",
                    self.labels
                )));
            }
        }
        let mut unpredicted = 0;
        for (&p, &t) in pairs() {
            if p == IGNORE_LABEL {
                unpredicted += 1;
            } else {
                self.record(t, p);
            }
        }
        Ok(unpredicted)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.labels != self.labels {
            return Err(Error::mismatch("confusion matrices differ in label count"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn compute_metrics(&self) -> Result<Metrics> {
        compute_metrics(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    /// Ground-truth pixels of this class (`t_i`).
    pub truth: u64,
    /// Pixels predicted as this class.
    pub predicted: u64,
    pub correct: u64,
    /// `None` for classes absent from the ground truth.
    pub accuracy: Option<f64>,
    pub iu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub pixel_accuracy: f64,
    pub mean_accuracy: f64,
    pub mean_iu: f64,
    pub frequency_weighted_iu: f64,
    /// Classes with at least one ground-truth pixel.
    pub present_classes: usize,
    pub total: u64,
    pub per_class: Vec<ClassStats>,
}

/// Pixel accuracy, mean accuracy, mean IU and frequency-weighted IU.
///
/// Classes absent from the ground truth (`t_i = 0`) are left out of the class
/// averages, though they still count as false positives of other classes.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let l = cm.labels;
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    let mut per_class = Vec::with_capacity(l);
    let (mut correct_sum, mut acc_sum, mut iu_sum, mut fw_sum) = (0u64, 0.0, 0.0, 0.0);
    let mut present = 0usize;
    for i in 0..l {
        let truth: u64 = (0..l).map(|j| cm.count(i, j)).sum();
        let predicted: u64 = (0..l).map(|j| cm.count(j, i)).sum();
        let correct = cm.count(i, i);
        let (accuracy, iu) = if truth > 0 {
            present += 1;
            let acc = correct as f64 / truth as f64;
            let iu = correct as f64 / (truth + predicted - correct) as f64;
            correct_sum += correct;
            acc_sum += acc;
            iu_sum += iu;
            fw_sum += truth as f64 * iu;
            (Some(acc), Some(iu))
        } else {
            (None, None)
        };
        per_class.push(ClassStats {
            truth,
            predicted,
            correct,
            accuracy,
            iu,
        });
    }
    Ok(Metrics {
        pixel_accuracy: correct_sum as f64 / total as f64,
        mean_accuracy: acc_sum / present as f64,
        mean_iu: iu_sum / present as f64,
        frequency_weighted_iu: fw_sum / total as f64,
        present_classes: present,
        total,
        per_class,
    })
}

impl Metrics {
    /// Flat `key=value` report.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "pixel_accuracy={:.6}", self.pixel_accuracy);
        let _ = writeln!(out, "mean_accuracy={:.6}", self.mean_accuracy);
        let _ = writeln!(out, "mean_iu={:.6}", self.mean_iu);
        let _ = writeln!(out, "frequency_weighted_iu={:.6}", self.frequency_weighted_iu);
        let _ = writeln!(out, "present_classes={}", self.present_classes);
        let _ = writeln!(out, "pixels={}", self.total);
        out
    }

    /// One CSV row per class: `label,name,truth,predicted,correct,accuracy,iu`.
    /// Scores of absent classes are left empty.
    pub fn per_class_csv(&self, names: &[String]) -> String {
        let mut out = String::from("label,name,truth,predicted,correct,accuracy,iu\n");
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for (i, c) in self.per_class.iter().enumerate() {
            let name = names.get(i).map(String::as_str).unwrap_or("");
            let _ = writeln!(
                out,
                "{i},{name},{},{},{},{},{}",
                c.truth,
                c.predicted,
                c.correct,
                fmt(c.accuracy),
                fmt(c.iu)
            );
        }
        out
    }
}

/// Annotated view used to score a fused map.
#[derive(Debug, Clone)]
pub struct GroundTruthView {
    pub truth: LabelImage,
    pub depth: DepthImage,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedEvaluation {
    pub confusion: ConfusionMatrix,
    /// Annotated pixels with valid depth.
    pub evaluated: u64,
    /// Of those, pixels whose voxel is absent from the map.
    pub missing: u64,
}

impl FusedEvaluation {
    pub fn coverage(&self) -> f64 {
        if self.evaluated == 0 {
            0.0
        } else {
            (self.evaluated - self.missing) as f64 / self.evaluated as f64
        }
    }
}

/// Labels each valid-depth pixel of a view with the argmax of the voxel its
/// back-projected point falls in. Pixels without depth or without a voxel get
/// the ignore value.
pub fn render_map_labels(
    map: &VoxelMap,
    depth: &DepthImage,
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
) -> Result<LabelImage> {
    let grid = back_project(depth, intrinsics)?;
    let data = grid
        .points
        .iter()
        .zip(&grid.valid)
        .map(|(&p, &ok)| {
            ok.then(|| map.voxel_at(pose.apply(p)))
                .flatten()
                .map_or(IGNORE_LABEL, |v| v.best().0)
        })
        .collect();
    LabelImage::new(depth.height(), depth.width(), map.labels(), data)
}

/// Scores a fused map per pixel: each annotated pixel with valid depth is
/// lifted to the world frame and predicted with its voxel's argmax label.
pub fn evaluate_fused_map(map: &VoxelMap, views: &[GroundTruthView]) -> Result<FusedEvaluation> {
    let mut confusion = ConfusionMatrix::new(map.labels());
    let (mut evaluated, mut missing) = (0u64, 0u64);
    for (k, view) in views.iter().enumerate() {
        if view.truth.height() != view.depth.height() || view.truth.width() != view.depth.width() {
            return Err(Error::mismatch(format!("view {k}: truth and depth sizes differ")));
        }
        if view.truth.labels() != map.labels() {
            return Err(Error::mismatch(format!(
                "view {k} has {} labels, map has {}",
                view.truth.labels(),
                map.labels()
            )));
        }
        let predicted = render_map_labels(map, &view.depth, &view.intrinsics, &view.pose)?;
        let annotated_with_depth = view
            .truth
            .data()
            .iter()
            .zip(view.depth.samples())
            .filter(|(&t, &d)| t != IGNORE_LABEL && d != 0)
            .count() as u64;
        // Pixels without depth carry no prediction and are not evaluated.
        let masked: Vec<u8> = view
            .truth
            .data()
            .iter()
            .zip(view.depth.samples())
            .map(|(&t, &d)| if d == 0 { IGNORE_LABEL } else { t })
            .collect();
        let truth = LabelImage::new(view.truth.height(), view.truth.width(), map.labels(), masked)?;
        missing += confusion.accumulate(&predicted, &truth)?;
        evaluated += annotated_with_depth;
    }
    Ok(FusedEvaluation {
        confusion,
        evaluated,
        missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn img(labels: usize, data: Vec<u8>) -> LabelImage {
        LabelImage::new(1, data.len(), labels, data).unwrap()
    }

    #[test]
    fn accumulate_examples() {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&img(4, vec![1, 2]), &img(4, vec![IGNORE_LABEL; 2]))
            .unwrap();
        assert_eq!(cm.total(), 0);
        cm.accumulate(&img(4, vec![3; 10]), &img(4, vec![3; 10])).unwrap();
        assert_eq!(cm.count(3, 3), 10);

        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&img(2, vec![0, 1, 1, 0]), &img(2, vec![0, 0, 1, 1]))
            .unwrap();
        assert_eq!(cm.counts(), &[1, 1, 1, 1]);

        let mut cm = ConfusionMatrix::new(2);
        assert_eq!(
            cm.accumulate(&img(2, vec![IGNORE_LABEL, 1]), &img(2, vec![0, 1])).unwrap(),
            1
        );
        assert_eq!(cm.total(), 1);
        assert!(cm.accumulate(&img(3, vec![2]), &img(3, vec![0])).is_err());
        assert!(cm.accumulate(&img(2, vec![0, 1]), &img(2, vec![0])).is_err());
    }

    #[test]
    fn metrics_examples() {
        let perfect = ConfusionMatrix::from_counts(3, vec![5, 0, 0, 0, 2, 0, 0, 0, 9]).unwrap();
        let m = perfect.compute_metrics().unwrap();
        assert_eq!(
            (m.pixel_accuracy, m.mean_accuracy, m.mean_iu, m.frequency_weighted_iu),
            (1.0, 1.0, 1.0, 1.0)
        );

        let m = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 3])
            .unwrap()
            .compute_metrics()
            .unwrap();
        assert_relative_eq!(m.pixel_accuracy, 0.75, epsilon = 1e-15);
        assert_relative_eq!(m.mean_accuracy, 0.75, epsilon = 1e-15);
        assert_relative_eq!(m.mean_iu, 0.6, epsilon = 1e-15);
        assert_relative_eq!(m.frequency_weighted_iu, 0.6, epsilon = 1e-15);

        assert!(matches!(
            ConfusionMatrix::new(3).compute_metrics(),
            Err(Error::EmptyMatrix)
        ));
    }

    #[test]
    fn never_recognised_class_drags_mean_accuracy() {
        // class 2 ("mirror") present but always predicted as class 0
        let cm = ConfusionMatrix::from_counts(3, vec![50, 0, 0, 0, 50, 0, 4, 0, 0]).unwrap();
        let m = cm.compute_metrics().unwrap();
        assert_eq!(m.per_class[2].accuracy, Some(0.0));
        assert_relative_eq!(m.mean_accuracy, 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(m.pixel_accuracy, 100.0 / 104.0, epsilon = 1e-15);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let base = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap();
        // embed into 4 labels; classes 2 and 3 never occur in truth, but class 3 absorbs a false positive
        let padded = ConfusionMatrix::from_counts(
            4,
            vec![3, 1, 0, 0, 2, 4, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
        )
        .unwrap();
        let a = base.compute_metrics().unwrap();
        let b = padded.compute_metrics().unwrap();
        assert_eq!(b.present_classes, 2);
        assert_eq!(b.per_class[3].accuracy, None);
        assert_relative_eq!(a.pixel_accuracy, b.pixel_accuracy);
        assert_relative_eq!(a.mean_accuracy, b.mean_accuracy);
        assert_relative_eq!(a.mean_iu, b.mean_iu);
        assert_relative_eq!(a.frequency_weighted_iu, b.frequency_weighted_iu);

        let with_fp = ConfusionMatrix::from_counts(
            3,
            vec![3, 1, 1, 2, 4, 0, 0, 0, 0],
        )
        .unwrap()
        .compute_metrics()
        .unwrap();
        assert_eq!(with_fp.present_classes, 2);
        assert_relative_eq!(with_fp.mean_accuracy, (3.0 / 5.0 + 4.0 / 6.0) / 2.0);
    }

    #[test]
    fn reports_render() {
        let m = ConfusionMatrix::from_counts(3, vec![3, 1, 0, 1, 3, 0, 0, 0, 0])
            .unwrap()
            .compute_metrics()
            .unwrap();
        let kv = m.to_key_value();
        assert!(kv.contains("pixel_accuracy=0.750000\n"));
        assert!(kv.contains("mean_iu=0.600000\n"));
        let csv = m.per_class_csv(&["brick".into(), "carpet".into(), "glass".into()]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "0,brick,4,4,3,0.750000,0.600000");
        assert_eq!(lines[3], "2,glass,0,0,0,,");
    }

    proptest! {
        #[test]
        fn scores_are_permutation_invariant_and_bounded(
            counts in prop::collection::vec(0u64..20, 16),
            perm_seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let cm = ConfusionMatrix::from_counts(4, counts.clone()).unwrap();
            prop_assume!(cm.total() > 0);
            let mut perm: Vec<usize> = (0..4).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            let mut permuted = vec![0u64; 16];
            for i in 0..4 {
                for j in 0..4 {
                    permuted[perm[i] * 4 + perm[j]] = counts[i * 4 + j];
                }
            }
            let a = cm.compute_metrics().unwrap();
            let b = ConfusionMatrix::from_counts(4, permuted).unwrap().compute_metrics().unwrap();
            for (x, y) in [
                (a.pixel_accuracy, b.pixel_accuracy),
                (a.mean_accuracy, b.mean_accuracy),
                (a.mean_iu, b.mean_iu),
                (a.frequency_weighted_iu, b.frequency_weighted_iu),
            ] {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }
    }
}
