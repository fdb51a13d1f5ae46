//! Pinhole back-projection of depth images and rigid transforms of semantic
//! point clouds.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::crf::{argmax_of, LabelDistributionImage};
use crate::error::{Error, Result};
use crate::raster::{DepthImage, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Meters per stored depth unit.
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, depth_scale: f64) -> Result<Self> {
        let intr = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            depth_scale,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.depth_scale]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 || self.depth_scale <= 0.0 {
            return Err(Error::config(format!(
                "intrinsics need finite values with fx, fy, depth_scale > 0: {self:?}"
            )));
        }
        Ok(())
    }

    /// Pixel coordinates `(u, v)` of a camera-frame point with positive depth.
    pub fn project(&self, point: [f64; 3]) -> (f64, f64) {
        let [x, y, z] = point;
        (self.fx * x / z + self.cx, self.fy * y / z + self.cy)
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose(Matrix4<f64>);

impl Pose {
    pub const TOLERANCE: f64 = 1e-5;

    /// Builds a pose from 16 row-major values, checking rigidity.
    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            return Err(Error::invalid(format!(
                "pose needs 16 values, got {}",
                values.len()
            )));
        }
        Pose::from_matrix(Matrix4::from_row_slice(values))
    }

    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pose has non-finite entries"));
        }
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid(format!(
                "pose bottom row must be (0, 0, 0, 1), got {bottom:?}"
            )));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let gram = r.transpose() * r - Matrix3::identity();
        if gram.iter().any(|v| v.abs() > Self::TOLERANCE) {
            return Err(Error::invalid("pose rotation block is not orthonormal"));
        }
        if (r.determinant() - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::invalid("pose rotation has determinant != +1"));
        }
        Ok(Pose(m))
    }

    pub fn identity() -> Self {
        Pose(Matrix4::identity())
    }

    pub fn from_rotation_translation(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Pose::from_matrix(m)
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Pose(Matrix4::new_translation(&Vector3::new(x, y, z)))
    }

    /// Rotation by `angle` radians about the world Z axis.
    pub fn yaw(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let mut m = Matrix4::identity();
        m[(0, 0)] = c;
        m[(0, 1)] = -s;
        m[(1, 0)] = s;
        m[(1, 1)] = c;
        Pose(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.0[(r, c)];
            }
        }
        out
    }

    /// Rigid inverse `[R^T, -R^T t]`.
    pub fn inverse(&self) -> Self {
        let r = self.0.fixed_view::<3, 3>(0, 0).transpose();
        let t = self.0.fixed_view::<3, 1>(0, 3).into_owned();
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-(r * t)));
        Pose(m)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose(self.0 * other.0)
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[(0, 0)] * p[0] + m[(0, 1)] * p[1] + m[(0, 2)] * p[2] + m[(0, 3)],
            m[(1, 0)] * p[0] + m[(1, 1)] * p[1] + m[(1, 2)] * p[2] + m[(1, 3)],
            m[(2, 0)] * p[0] + m[(2, 1)] * p[1] + m[(2, 2)] * p[2] + m[(2, 3)],
        ]
    }
}

/// Organized camera-frame points with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PointGrid {
    pub height: usize,
    pub width: usize,
    pub points: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl PointGrid {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// `X = (u - cx) z / fx`, `Y = (v - cy) z / fy`, `Z = z` with `z = raw * depth_scale`.
/// Raw depth `0` marks a missing measurement.
pub fn back_project(depth: &DepthImage, intr: &CameraIntrinsics) -> Result<PointGrid> {
    intr.validate()?;
    let (h, w) = (depth.height(), depth.width());
    let mut points = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            let raw = depth.get(v, u);
            if raw == 0 {
                points.push([0.0; 3]);
                valid.push(false);
                continue;
            }
            let z = raw as f64 * intr.depth_scale;
            points.push([
                (u as f64 - intr.cx) * z / intr.fx,
                (v as f64 - intr.cy) * z / intr.fy,
                z,
            ]);
            valid.push(true);
        }
    }
    Ok(PointGrid {
        height: h,
        width: w,
        points,
        valid,
    })
}

/// Label information carried by each point.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelPayload {
    /// Full `len x labels` probability vectors.
    Distributions(Vec<f64>),
    /// Hard label with its probability; the remaining mass is spread evenly.
    Compact { labels: Vec<u8>, confidence: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticPointCloud {
    pub frame_id: String,
    pub labels: usize,
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[u8; 3]>,
    pub payload: LabelPayload,
}

impl SemanticPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Writes point `i`'s label distribution into `out` (length `labels`).
    pub fn distribution_into(&self, i: usize, out: &mut [f64]) {
        match &self.payload {
            LabelPayload::Distributions(d) => {
                out.copy_from_slice(&d[i * self.labels..(i + 1) * self.labels])
            }
            LabelPayload::Compact { labels, confidence } => {
                let c = confidence[i];
                let rest = if self.labels > 1 {
                    (1.0 - c) / (self.labels - 1) as f64
                } else {
                    0.0
                };
                out.iter_mut().for_each(|v| *v = rest);
                out[labels[i] as usize] = c;
            }
        }
    }

    /// Most likely label and its probability for point `i`.
    pub fn hard_label(&self, i: usize) -> (u8, f64) {
        match &self.payload {
            LabelPayload::Distributions(d) => {
                let dist = &d[i * self.labels..(i + 1) * self.labels];
                let l = argmax_of(dist);
                (l as u8, dist[l])
            }
            LabelPayload::Compact { labels, confidence } => (labels[i], confidence[i]),
        }
    }

    /// Drops the full distributions, keeping argmax label and confidence.
    pub fn to_compact(&self) -> SemanticPointCloud {
        let (labels, confidence) = (0..self.len()).map(|i| self.hard_label(i)).unzip();
        SemanticPointCloud {
            payload: LabelPayload::Compact { labels, confidence },
            ..self.clone()
        }
    }
}

/// One point per valid depth pixel, in row-major pixel order, carrying that
/// pixel's marginal and color.
pub fn make_semantic_cloud(
    grid: &PointGrid,
    marginals: &LabelDistributionImage<f64>,
    rgb: &RgbImage,
    frame_id: &str,
) -> Result<SemanticPointCloud> {
    let dims = [
        (marginals.height(), marginals.width()),
        (rgb.height(), rgb.width()),
    ];
    if dims.iter().any(|&d| d != (grid.height, grid.width)) {
        return Err(Error::mismatch(format!(
            "depth is {}x{}, marginals {}x{}, color {}x{}",
            grid.height,
            grid.width,
            marginals.height(),
            marginals.width(),
            rgb.height(),
            rgb.width()
        )));
    }
    let labels = marginals.labels();
    let count = grid.valid_count();
    let mut points = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    let mut dists = Vec::with_capacity(count * labels);
    for (i, &ok) in grid.valid.iter().enumerate() {
        if ok {
            points.push(grid.points[i]);
            colors.push(rgb.pixels()[i]);
            dists.extend_from_slice(marginals.pixel(i));
        }
    }
    Ok(SemanticPointCloud {
        frame_id: frame_id.to_string(),
        labels,
        points,
        colors,
        payload: LabelPayload::Distributions(dists),
    })
}

/// Maps positions through `pose`; labels and colors are untouched.
pub fn transform_cloud(cloud: &SemanticPointCloud, pose: &Pose) -> SemanticPointCloud {
    SemanticPointCloud {
        points: cloud.points.iter().map(|&p| pose.apply(p)).collect(),
        ..cloud.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn kinect() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 0.001).unwrap()
    }

    #[test]
    fn back_projection_examples() {
        let mut raw = vec![0u16; 480 * 640];
        raw[240 * 640 + 320] = 1000;
        raw[240 * 640 + 420] = 2000;
        let depth = DepthImage::new(480, 640, raw).unwrap();
        let grid = back_project(&depth, &kinect()).unwrap();
        assert_eq!(grid.points[240 * 640 + 320], [0.0, 0.0, 1.0]);
        let p = grid.points[240 * 640 + 420];
        assert_relative_eq!(p[0], 0.4, epsilon = 1e-12);
        assert_relative_eq!(p[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(p[2], 2.0, epsilon = 1e-12);
        assert!(!grid.valid[0]);
        assert_eq!(grid.valid_count(), 2);
    }

    #[test]
    fn cloud_keeps_valid_pixels_in_order() {
        let depth = DepthImage::new(2, 2, vec![1000, 0, 1200, 1500]).unwrap();
        let grid = back_project(&depth, &kinect()).unwrap();
        let q = LabelDistributionImage::new(
            2,
            2,
            2,
            vec![0.9, 0.1, 0.5, 0.5, 0.2, 0.8, 0.3, 0.7],
        )
        .unwrap();
        let rgb = RgbImage::new(2, 2, vec![[1, 1, 1], [2, 2, 2], [3, 3, 3], [4, 4, 4]]).unwrap();
        let cloud = make_semantic_cloud(&grid, &q, &rgb, "f0").unwrap();
        assert_eq!(cloud.len(), 3);
        assert_eq!(cloud.colors, vec![[1, 1, 1], [3, 3, 3], [4, 4, 4]]);
        assert_eq!(
            cloud.payload,
            LabelPayload::Distributions(vec![0.9, 0.1, 0.2, 0.8, 0.3, 0.7])
        );
        assert_eq!(cloud.hard_label(1), (1, 0.8));

        let empty = DepthImage::new(2, 2, vec![0; 4]).unwrap();
        let grid = back_project(&empty, &kinect()).unwrap();
        assert!(make_semantic_cloud(&grid, &q, &rgb, "f0").unwrap().is_empty());

        let small = RgbImage::filled(1, 2, [0; 3]).unwrap();
        assert!(make_semantic_cloud(&grid, &q, &small, "f0").is_err());
    }

    #[test]
    fn compact_payload_expands_evenly() {
        let cloud = SemanticPointCloud {
            frame_id: "c".into(),
            labels: 3,
            points: vec![[0.0; 3]],
            colors: vec![[0; 3]],
            payload: LabelPayload::Distributions(vec![0.1, 0.7, 0.2]),
        };
        let compact = cloud.to_compact();
        let mut out = [0.0; 3];
        compact.distribution_into(0, &mut out);
        assert_relative_eq!(out[1], 0.7);
        assert_relative_eq!(out[0], 0.15, epsilon = 1e-15);
        assert_relative_eq!(out[2], 0.15, epsilon = 1e-15);
    }

    #[test]
    fn pose_transforms() {
        let cloud = SemanticPointCloud {
            frame_id: "p".into(),
            labels: 1,
            points: vec![[1.0, 0.0, 0.0], [0.5, -2.0, 3.0]],
            colors: vec![[0; 3]; 2],
            payload: LabelPayload::Distributions(vec![1.0, 1.0]),
        };
        assert_eq!(transform_cloud(&cloud, &Pose::identity()), cloud);
        let shifted = transform_cloud(&cloud, &Pose::translation(1.0, 0.0, 0.0));
        assert_eq!(shifted.points, vec![[2.0, 0.0, 0.0], [1.5, -2.0, 3.0]]);
        let rotated = transform_cloud(&cloud, &Pose::yaw(std::f64::consts::FRAC_PI_2));
        let p = rotated.points[0];
        assert!((p[0]).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12 && p[2].abs() < 1e-12);
    }

    #[test]
    fn pose_validation() {
        let mut m = Pose::identity().to_row_major();
        assert!(Pose::from_row_major(&m).is_ok());
        assert!(Pose::from_row_major(&m[..15]).is_err());
        m[0] = 2.0;
        assert!(Pose::from_row_major(&m).is_err());
        let mut m = Pose::identity().to_row_major();
        m[0] = -1.0; // reflection
        assert!(Pose::from_row_major(&m).is_err());
        let mut m = Pose::identity().to_row_major();
        m[14] = 0.5;
        assert!(Pose::from_row_major(&m).is_err());
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            -3.0..3.0f64,
            -1.5..1.5f64,
            -3.0..3.0f64,
            prop::array::uniform3(-5.0..5.0f64),
        )
            .prop_map(|(yaw, pitch, roll, t)| {
                let r = nalgebra::Rotation3::from_euler_angles(roll, pitch, yaw);
                Pose::from_rotation_translation(*r.matrix(), Vector3::from(t)).unwrap()
            })
    }

    proptest! {
        #[test]
        fn transform_round_trip(pose in arb_pose(), pts in prop::collection::vec(prop::array::uniform3(-10.0..10.0f64), 1..20)) {
            let n = pts.len();
            let cloud = SemanticPointCloud {
                frame_id: "r".into(),
                labels: 1,
                points: pts,
                colors: vec![[0; 3]; n],
                payload: LabelPayload::Distributions(vec![1.0; n]),
            };
            let back = transform_cloud(&transform_cloud(&cloud, &pose), &pose.inverse());
            for (a, b) in back.points.iter().zip(&cloud.points) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn projection_inverts_back_projection(raw in prop::collection::vec(0u16..8000, 12)) {
            let intr = CameraIntrinsics::new(525.0, 520.0, 1.7, 1.2, 0.001).unwrap();
            let depth = DepthImage::new(3, 4, raw.clone()).unwrap();
            let grid = back_project(&depth, &intr).unwrap();
            prop_assert_eq!(grid.valid_count(), raw.iter().filter(|&&r| r != 0).count());
            for (i, p) in grid.points.iter().enumerate() {
                if grid.valid[i] {
                    let (u, v) = intr.project(*p);
                    prop_assert!((u - (i % 4) as f64).abs() < 1e-9);
                    prop_assert!((v - (i / 4) as f64).abs() < 1e-9);
                }
            }
        }
    }
}
