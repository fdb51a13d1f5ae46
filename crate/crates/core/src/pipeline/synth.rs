//! Synthetic RGB-D scenes with corrupted unaries.
//!
//! Scenes are an axis-aligned room with axis-aligned material boxes, seen by
//! a pinhole camera orbiting a target. World z is up; camera x points right,
//! y down and z forward.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crf::{LabelDistributionImage, LabelImage, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::projection::{CameraIntrinsics, Pose};
use crate::raster::{DepthImage, RgbImage};

use super::config::{default_label_colors, PipelineConfig};
use super::manifest::{format_manifest, FrameRecord};
use super::netpbm::{write_depth_pgm, write_label_pgm, write_ppm};
use super::unary::write_unary;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub label: u8,
}

impl SceneBox {
    pub fn new(min: [f64; 3], max: [f64; 3], label: u8) -> Self {
        SceneBox { min, max, label }
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// Ray parameters where the ray enters and leaves the box, with the axis
    /// crossed on entry and on exit.
    fn slab(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, usize, f64, usize)> {
        let (mut near, mut near_axis) = (f64::NEG_INFINITY, 0);
        let (mut far, mut far_axis) = (f64::INFINITY, 0);
        for k in 0..3 {
            if dir[k] == 0.0 {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let a = (self.min[k] - origin[k]) / dir[k];
            let b = (self.max[k] - origin[k]) / dir[k];
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if lo > near {
                near = lo;
                near_axis = k;
            }
            if hi < far {
                far = hi;
                far_axis = k;
            }
        }
        (near <= far).then_some((near, near_axis, far, far_axis))
    }
}

/// Circular camera path around `target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraOrbit {
    /// Ground-plane center of the circle.
    pub center: [f64; 2],
    pub radius: f64,
    /// Camera height above the floor.
    pub height: f64,
    pub target: [f64; 3],
    pub frames: usize,
    /// Angle swept by the whole sequence, radians.
    pub arc: f64,
}

impl CameraOrbit {
    pub fn pose(&self, frame: usize) -> Result<Pose> {
        let angle = self.arc * frame as f64 / self.frames as f64;
        let eye = Vector3::new(
            self.center[0] + self.radius * angle.cos(),
            self.center[1] + self.radius * angle.sin(),
            self.height,
        );
        look_at(eye, Vector3::from(self.target))
    }
}

/// Camera-to-world pose of a camera at `eye` facing `target`, with the image
/// rows aligned to world z.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Result<Pose> {
    let forward = (target - eye)
        .try_normalize(1e-12)
        .ok_or_else(|| Error::invalid("camera target coincides with its position"))?;
    let right = forward
        .cross(&Vector3::z())
        .try_normalize(1e-9)
        .ok_or_else(|| Error::invalid("camera looks straight up or down"))?;
    let down = forward.cross(&right);
    Pose::from_rotation_translation(Matrix3::from_columns(&[right, down, forward]), eye)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    pub room_label: u8,
    pub boxes: Vec<SceneBox>,
    pub orbit: CameraOrbit,
    pub height: usize,
    pub width: usize,
    pub intrinsics: CameraIntrinsics,
    pub labels: usize,
    /// Probability that a pixel's unary favors a wrong label.
    pub epsilon: f64,
    /// Probability mass placed on the favored label.
    pub confidence: f64,
    /// Half-width of the uniform per-pixel color jitter.
    pub jitter: u8,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    /// A painted room holding a table top and several free-standing objects
    /// of distinct MINC materials, with every surface of different material
    /// at least 9 cm apart. 23 labels, 20 frames on a full orbit.
    pub fn desk(seed: u64) -> Self {
        let (w, h) = (128usize, 96usize);
        SyntheticSceneSpec {
            room_min: [-2.0, -2.0, 0.0],
            room_max: [2.0, 2.0, 2.5],
            room_label: 12,
            boxes: vec![
                SceneBox::new([-0.5, -0.35, 0.70], [0.5, 0.35, 0.76], 22),
                SceneBox::new([-0.35, -0.2, 0.85], [-0.05, 0.15, 1.05], 3),
                SceneBox::new([0.1, -0.25, 0.85], [0.35, 0.0, 1.0], 9),
                SceneBox::new([0.15, 0.1, 0.86], [0.4, 0.3, 1.15], 6),
                SceneBox::new([-1.0, 0.6, 0.2], [-0.6, 1.0, 0.6], 0),
                SceneBox::new([0.8, -1.1, 0.3], [1.1, -0.8, 0.6], 14),
                SceneBox::new([-1.0, -1.1, 0.1], [-0.6, -0.8, 0.4], 8),
            ],
            orbit: CameraOrbit {
                center: [0.0, 0.0],
                radius: 1.6,
                height: 1.4,
                target: [0.0, 0.0, 0.6],
                frames: 20,
                arc: TAU,
            },
            height: h,
            width: w,
            intrinsics: CameraIntrinsics {
                fx: 100.0,
                fy: 100.0,
                cx: (w as f64 - 1.0) / 2.0,
                cy: (h as f64 - 1.0) / 2.0,
                depth_scale: 0.001,
            },
            labels: 23,
            epsilon: 0.2,
            confidence: 0.6,
            jitter: 8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.labels < 2 || self.labels > 255 {
            return bad(format!("label count {} outside 2..=255", self.labels));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad(format!("epsilon {} outside [0, 1)", self.epsilon));
        }
        if !(self.confidence > 1.0 / self.labels as f64 && self.confidence <= 1.0) {
            return bad(format!("confidence {} outside (1/L, 1]", self.confidence));
        }
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        if self.orbit.frames == 0 {
            return bad("the orbit needs at least one frame".into());
        }
        self.intrinsics.validate()?;
        if (0..3).any(|k| self.room_min[k] >= self.room_max[k]) {
            return bad("room extents are empty".into());
        }
        let room = SceneBox::new(self.room_min, self.room_max, self.room_label);
        for (i, b) in self.boxes.iter().enumerate() {
            if (0..3).any(|k| b.min[k] >= b.max[k]) {
                return bad(format!("box {i} is empty"));
            }
            if !room.contains(b.min) || !room.contains(b.max) {
                return bad(format!("box {i} leaves the room"));
            }
        }
        for b in self.boxes.iter().chain([&room]) {
            if b.label as usize >= self.labels {
                return bad(format!("material label {} not below {}", b.label, self.labels));
            }
        }
        for k in 0..self.orbit.frames {
            let eye = self.orbit.pose(k)?.apply([0.0; 3]);
            if !room.contains(eye) || self.boxes.iter().any(|b| b.contains(eye)) {
                return bad(format!("camera {k} is outside the room or inside a box"));
            }
        }
        Ok(())
    }
}

/// One rendered and corrupted view.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub truth: LabelImage,
    pub probs: LabelDistributionImage<f64>,
    /// Pixels whose unary favors a wrong label.
    pub corrupted: usize,
}

const SHADE: [[f64; 2]; 3] = [[0.70, 0.85], [0.62, 0.78], [0.55, 1.0]];

fn jittered(base: [u8; 3], shade: f64, jitter: u8, rng: &mut ChaCha8Rng) -> [u8; 3] {
    let j = jitter as i32;
    let offset = if j > 0 { rng.gen_range(-j..=j) } else { 0 };
    base.map(|c| ((c as f64 * shade).round() as i32 + offset).clamp(0, 255) as u8)
}

/// Corrupts `truth`: with probability `epsilon` a pixel's favored label is
/// replaced by a uniformly drawn wrong one; the favored label then gets
/// `confidence` and the rest `(1 - confidence) / (labels - 1)` each. Ignored
/// pixels receive a uniform distribution.
pub fn corrupt_labels(
    truth: &LabelImage,
    epsilon: f64,
    confidence: f64,
    rng: &mut impl Rng,
) -> Result<(LabelDistributionImage<f64>, usize)> {
    let labels = truth.labels();
    if labels < 2 {
        return Err(Error::invalid("corruption needs at least two labels"));
    }
    let rest = (1.0 - confidence) / (labels - 1) as f64;
    let mut data = Vec::with_capacity(truth.data().len() * labels);
    let mut corrupted = 0;
    for &t in truth.data() {
        if t == IGNORE_LABEL {
            data.extend(std::iter::repeat(1.0 / labels as f64).take(labels));
            continue;
        }
        let mut favored = t as usize;
        if rng.gen::<f64>() < epsilon {
            let r = rng.gen_range(0..labels - 1);
            favored = if r >= favored { r + 1 } else { r };
            corrupted += 1;
        }
        data.extend((0..labels).map(|l| if l == favored { confidence } else { rest }));
    }
    let probs = LabelDistributionImage::new(truth.height(), truth.width(), labels, data)?;
    Ok((probs, corrupted))
}

/// Ray-casts the scene from `pose`, then corrupts the labels. Randomness is
/// drawn from `rng` in pixel order: color jitter first, then corruption.
pub fn render_view(spec: &SyntheticSceneSpec, pose: &Pose, rng: &mut ChaCha8Rng) -> Result<RenderedView> {
    let (h, w) = (spec.height, spec.width);
    let intr = &spec.intrinsics;
    let colors = default_label_colors(spec.labels);
    let room = SceneBox::new(spec.room_min, spec.room_max, spec.room_label);
    let origin = pose.apply([0.0; 3]);
    let rot = pose.matrix().fixed_view::<3, 3>(0, 0).into_owned();

    let mut rgb = Vec::with_capacity(h * w);
    let mut depth = Vec::with_capacity(h * w);
    let mut truth = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            let ray = rot * Vector3::new((u as f64 - intr.cx) / intr.fx, (v as f64 - intr.cy) / intr.fy, 1.0);
            let dir = [ray.x, ray.y, ray.z];
            // Inside the room the exit point is the visible wall.
            let (mut t, mut axis, mut label) = match room.slab(origin, dir) {
                Some((_, _, far, far_axis)) => (far, far_axis, room.label),
                None => (f64::INFINITY, 2, IGNORE_LABEL),
            };
            let mut entering = false;
            for b in &spec.boxes {
                if let Some((near, near_axis, _, _)) = b.slab(origin, dir) {
                    if near > 0.0 && near < t {
                        (t, axis, label, entering) = (near, near_axis, b.label, true);
                    }
                }
            }
            let raw = (t / intr.depth_scale).round();
            let valid = t.is_finite() && raw >= 1.0 && raw <= u16::MAX as f64;
            // The visible face's outward normal points against the ray for a
            // box and along the ray for the room.
            let positive = (dir[axis] > 0.0) != entering;
            let shade = SHADE[axis][positive as usize];
            if valid {
                depth.push(raw as u16);
                truth.push(label);
                rgb.push(jittered(colors[label as usize], shade, spec.jitter, rng));
            } else {
                depth.push(0);
                truth.push(IGNORE_LABEL);
                rgb.push([0, 0, 0]);
            }
        }
    }
    let truth = LabelImage::new(h, w, spec.labels, truth)?;
    let (probs, corrupted) = corrupt_labels(&truth, spec.epsilon, spec.confidence, rng)?;
    Ok(RenderedView {
        rgb: RgbImage::new(h, w, rgb)?,
        depth: DepthImage::new(h, w, depth)?,
        truth,
        probs,
        corrupted,
    })
}

/// Renders every orbit frame into `out_dir` and writes `manifest.txt` whose
/// header carries the scene's intrinsics and label count. Returns the
/// manifest path.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut config = PipelineConfig::default();
    config.set("labels", &spec.labels.to_string())?;
    config.intrinsics = spec.intrinsics;
    config.seed = spec.seed;

    let mut frames = Vec::with_capacity(spec.orbit.frames);
    for k in 0..spec.orbit.frames {
        let pose = spec.orbit.pose(k)?;
        let view = render_view(spec, &pose, &mut rng)?;
        let id = format!("frame_{k:03}");
        let name = |suffix: &str| PathBuf::from(format!("{id}_{suffix}"));
        let record = FrameRecord {
            rgb_path: name("rgb.ppm"),
            depth_path: name("depth.pgm"),
            unary_path: name("unary.unry"),
            truth_path: Some(name("truth.pgm")),
            frame_id: id,
            pose,
        };
        write_ppm(out_dir.join(&record.rgb_path), &view.rgb)?;
        write_depth_pgm(out_dir.join(&record.depth_path), &view.depth)?;
        write_unary(out_dir.join(&record.unary_path), &view.probs)?;
        write_label_pgm(out_dir.join(record.truth_path.as_ref().unwrap()), &view.truth)?;
        frames.push(record);
    }
    let path = out_dir.join("manifest.txt");
    fs::write(&path, format_manifest(&config, &frames))?;
    Ok(path)
}

/// A flat image of random label rectangles, colored per label, with
/// corrupted unaries.
#[derive(Debug, Clone)]
pub struct PiecewiseScene {
    pub rgb: RgbImage,
    pub truth: LabelImage,
    pub probs: LabelDistributionImage<f64>,
}

/// Draws `regions` rectangles (sides between a sixth and a half of the image)
/// over a random background label, then corrupts the labels as
/// [`corrupt_labels`] does. Per-pixel color jitter is uniform in
/// `[-jitter, jitter]`.
#[allow(clippy::too_many_arguments)]
pub fn piecewise_constant_scene(
    height: usize,
    width: usize,
    labels: usize,
    regions: usize,
    epsilon: f64,
    confidence: f64,
    jitter: u8,
    seed: u64,
) -> Result<PiecewiseScene> {
    if height < 2 || width < 2 || !(2..=255).contains(&labels) {
        return Err(Error::invalid("piecewise scene needs at least 2x2 pixels and 2..=255 labels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![rng.gen_range(0..labels) as u8; height * width];
    let span = |n: usize, rng: &mut ChaCha8Rng| {
        let len = rng.gen_range((n / 6).max(1)..=(n / 2).max(1));
        let start = rng.gen_range(0..=n - len);
        start..start + len
    };
    for _ in 0..regions {
        let rows = span(height, &mut rng);
        let cols = span(width, &mut rng);
        let label = rng.gen_range(0..labels) as u8;
        for r in rows {
            data[r * width + cols.start..r * width + cols.end].fill(label);
        }
    }
    let colors = default_label_colors(labels);
    let rgb = data
        .iter()
        .map(|&l| jittered(colors[l as usize], 1.0, jitter, &mut rng))
        .collect();
    let truth = LabelImage::new(height, width, labels, data)?;
    let (probs, _) = corrupt_labels(&truth, epsilon, confidence, &mut rng)?;
    Ok(PiecewiseScene {
        rgb: RgbImage::new(height, width, rgb)?,
        truth,
        probs,
    })
}
