//! Batch orchestration: per-frame segmentation and back-projection, map
//! fusion, and file output.

mod config;
mod manifest;
mod netpbm;
mod ply;
mod resample;
mod synth;
mod unary;

pub use config::{default_label_colors, default_label_names, PipelineConfig, Precision, MINC_LABELS};
pub use manifest::{format_manifest, load_manifest, parse_manifest, FrameRecord, Manifest};
pub use netpbm::{
    decode_depth_pgm, decode_label_pgm, decode_ppm, read_depth_pgm, read_label_pgm, read_ppm,
    write_depth_pgm, write_label_pgm, write_ppm,
};
pub use ply::{cloud_vertices, decode_ply, encode_ply, read_ply, write_ply, PlyVertex};
pub use resample::{resample_labels, resample_probabilities};
pub use synth::{
    corrupt_labels, generate_synthetic, look_at, piecewise_constant_scene, render_view, CameraOrbit,
    PiecewiseScene, RenderedView, SceneBox, SyntheticSceneSpec,
};
pub use unary::{decode_unary, encode_unary, read_unary, write_unary, UNARY_MAGIC, UNARY_SUM_TOLERANCE};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::crf::{
    build_features, map_labeling, mean_field_infer, unary_from_probabilities, CrfParams,
    LabelDistributionImage, LabelImage, IGNORE_LABEL,
};
use crate::error::{Error, Result};
use crate::filtering::Backend;
use crate::fusion::VoxelMap;
use crate::metrics::{evaluate_fused_map, render_map_labels, FusedEvaluation, GroundTruthView, Metrics};
use crate::projection::{back_project, make_semantic_cloud, transform_cloud, PointGrid, SemanticPointCloud};
use crate::raster::{DepthImage, RgbImage};
use crate::scalar::Real;

fn infer_as<T: Real>(
    rgb: &RgbImage,
    probs: &LabelDistributionImage<f64>,
    params: &CrfParams<f64>,
    backend: Backend,
) -> Result<LabelDistributionImage<f64>> {
    let params = params.cast::<T>();
    let unary = unary_from_probabilities(&probs.cast::<T>())?;
    let plans = build_features(rgb, &params)?.plan(backend)?;
    let (q, _) = mean_field_infer(&unary, &plans, &params, false)?;
    Ok(q.cast())
}

/// Mean-field marginals for one image at the configured precision.
pub fn segment(
    rgb: &RgbImage,
    probs: &LabelDistributionImage<f64>,
    params: &CrfParams<f64>,
    backend: Backend,
    precision: Precision,
) -> Result<LabelDistributionImage<f64>> {
    match precision {
        Precision::F64 => infer_as::<f64>(rgb, probs, params, backend),
        Precision::F32 => infer_as::<f32>(rgb, probs, params, backend),
    }
}

/// Decoded inputs of one frame, resampled to depth resolution.
#[derive(Debug, Clone)]
pub struct FrameInputs {
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub probs: LabelDistributionImage<f64>,
    pub truth: Option<LabelImage>,
}

pub fn load_frame(record: &FrameRecord, config: &PipelineConfig) -> Result<FrameInputs> {
    let inner = || -> Result<FrameInputs> {
        let depth = read_depth_pgm(&record.depth_path)?;
        let (h, w) = (depth.height(), depth.width());
        let rgb = read_ppm(&record.rgb_path)?;
        if (rgb.height(), rgb.width()) != (h, w) {
            return Err(Error::mismatch(format!(
                "color image is {}x{}, depth {h}x{w}",
                rgb.height(),
                rgb.width()
            )));
        }
        let probs = read_unary(&record.unary_path)?;
        if probs.labels() != config.labels() {
            return Err(Error::mismatch(format!(
                "{} has {} labels, configuration has {}",
                record.unary_path.display(),
                probs.labels(),
                config.labels()
            )));
        }
        let probs = resample_probabilities(&probs, h, w)?;
        let truth = match &record.truth_path {
            Some(p) => Some(resample_labels(&read_label_pgm(p, config.labels())?, h, w)?),
            None => None,
        };
        Ok(FrameInputs {
            rgb,
            depth,
            probs,
            truth,
        })
    };
    inner().map_err(|e| e.in_frame(&record.frame_id))
}

/// Wall-clock time per stage, summed over frames.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub load: Duration,
    pub crf: Duration,
    pub projection: Duration,
    pub fusion: Duration,
    pub evaluation: Duration,
    pub output: Duration,
}

impl std::ops::AddAssign for StageTimings {
    fn add_assign(&mut self, o: Self) {
        self.load += o.load;
        self.crf += o.crf;
        self.projection += o.projection;
        self.fusion += o.fusion;
        self.evaluation += o.evaluation;
        self.output += o.output;
    }
}

/// Per-frame accuracy over annotated pixels with valid depth.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub frame_id: String,
    pub points: usize,
    /// Unary argmax accuracy, when truth is available.
    pub unary_accuracy: Option<f64>,
    /// CRF accuracy, when truth is available.
    pub crf_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub marginals: LabelDistributionImage<f64>,
    /// Semantic point cloud in the world frame.
    pub cloud: SemanticPointCloud,
    pub inputs: FrameInputs,
    pub report: FrameReport,
    pub timings: StageTimings,
}

fn masked_accuracy(pred: &LabelImage, truth: &LabelImage, grid: &PointGrid) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
        if t != IGNORE_LABEL && grid.valid[i] {
            total += 1;
            hits += (p == t) as usize;
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Loads one frame, runs the CRF on its unaries and lifts the marginals into
/// a world-frame semantic point cloud.
pub fn run_frame(record: &FrameRecord, config: &PipelineConfig) -> Result<FrameOutput> {
    let mut timings = StageTimings::default();
    let t = Instant::now();
    let inputs = load_frame(record, config)?;
    timings.load = t.elapsed();

    let wrap = |e: Error| e.in_frame(&record.frame_id);
    let t = Instant::now();
    let marginals = segment(
        &inputs.rgb,
        &inputs.probs,
        &config.crf,
        config.backend,
        config.precision,
    )
    .map_err(wrap)?;
    timings.crf = t.elapsed();

    let t = Instant::now();
    let grid = back_project(&inputs.depth, &config.intrinsics).map_err(wrap)?;
    let camera = make_semantic_cloud(&grid, &marginals, &inputs.rgb, &record.frame_id).map_err(wrap)?;
    let cloud = transform_cloud(&camera, &record.pose);
    timings.projection = t.elapsed();

    let (unary_accuracy, crf_accuracy) = match &inputs.truth {
        Some(truth) => (
            masked_accuracy(&map_labeling(&inputs.probs), truth, &grid),
            masked_accuracy(&map_labeling(&marginals), truth, &grid),
        ),
        None => (None, None),
    };
    Ok(FrameOutput {
        report: FrameReport {
            frame_id: record.frame_id.clone(),
            points: cloud.len(),
            unary_accuracy,
            crf_accuracy,
        },
        marginals,
        cloud,
        inputs,
        timings,
    })
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub config: PipelineConfig,
    pub map: VoxelMap,
    pub frames: Vec<FrameReport>,
    /// Number of voxels that passed the extraction thresholds.
    pub extracted: usize,
    /// Fused-map scores against the frames that carry truth.
    pub evaluation: Option<(FusedEvaluation, Metrics)>,
    pub timings: StageTimings,
    pub written: Vec<PathBuf>,
}

impl PipelineOutput {
    /// Mean CRF accuracy over frames with truth.
    pub fn mean_frame_accuracy(&self) -> Option<f64> {
        let acc: Vec<f64> = self.frames.iter().filter_map(|f| f.crf_accuracy).collect();
        (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64)
    }
}

/// Loads a manifest, applies `overrides` on top of its header and runs the
/// pipeline.
pub fn run_pipeline(manifest_path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<PipelineOutput> {
    let manifest = load_manifest(manifest_path)?;
    let mut config = manifest.config;
    for (k, v) in overrides {
        config.set(k, v)?;
    }
    run_frames(&manifest.frames, &config)
}

/// Processes frames in order, fuses them into one map and writes the outputs
/// into `config.output_dir`:
///
/// * `map.ply`: extracted voxels;
/// * `labels/<frame_id>.pgm`: the fused map's labels seen from each frame;
/// * `frames/<frame_id>.ply`: per-frame clouds, when enabled;
/// * `metrics.txt`, `metrics_per_class.csv`: fused-map scores, when truth exists;
/// * `summary.txt`: counts, per-frame accuracies and stage timings.
pub fn run_frames(frames: &[FrameRecord], config: &PipelineConfig) -> Result<PipelineOutput> {
    config.validate()?;
    if frames.is_empty() {
        return Err(Error::config("manifest lists no frames"));
    }
    let out_dir = &config.output_dir;
    fs::create_dir_all(out_dir)?;
    if config.per_frame_ply {
        fs::create_dir_all(out_dir.join("frames"))?;
    }
    let mut written = Vec::new();
    let mut map = VoxelMap::new(config.voxel_resolution, config.labels())?;
    let mut timings = StageTimings::default();
    let mut reports = Vec::with_capacity(frames.len());
    let mut views = Vec::new();
    let mut depths = Vec::with_capacity(frames.len());
    for record in frames {
        let frame = run_frame(record, config)?;
        timings += frame.timings;

        let t = Instant::now();
        map.integrate_cloud(&frame.cloud)
            .map_err(|e| e.in_frame(&record.frame_id))?;
        timings.fusion += t.elapsed();

        if config.per_frame_ply {
            let t = Instant::now();
            let path = out_dir.join("frames").join(format!("{}.ply", record.frame_id));
            write_ply(&path, &cloud_vertices(&frame.cloud))?;
            written.push(path);
            timings.output += t.elapsed();
        }
        if let Some(truth) = frame.inputs.truth {
            views.push(GroundTruthView {
                truth,
                depth: frame.inputs.depth.clone(),
                intrinsics: config.intrinsics,
                pose: record.pose,
            });
        }
        depths.push(frame.inputs.depth);
        reports.push(frame.report);
    }

    let t = Instant::now();
    let points = map.extract(config.min_observations, config.min_confidence);
    let vertices: Vec<PlyVertex> = points.iter().map(PlyVertex::from).collect();
    let map_path = out_dir.join("map.ply");
    write_ply(&map_path, &vertices)?;
    written.push(map_path);
    fs::create_dir_all(out_dir.join("labels"))?;
    for (record, depth) in frames.iter().zip(&depths) {
        let labels = render_map_labels(&map, depth, &config.intrinsics, &record.pose)?;
        let path = out_dir.join("labels").join(format!("{}.pgm", record.frame_id));
        write_label_pgm(&path, &labels)?;
        written.push(path);
    }
    timings.output += t.elapsed();

    let evaluation = if views.is_empty() {
        None
    } else {
        let t = Instant::now();
        let eval = evaluate_fused_map(&map, &views)?;
        let metrics = eval.confusion.compute_metrics()?;
        timings.evaluation += t.elapsed();
        let report = format!(
            "{}coverage={:.6}\nevaluated_pixels={}\nmissing_pixels={}\n",
            metrics.to_key_value(),
            eval.coverage(),
            eval.evaluated,
            eval.missing
        );
        let path = out_dir.join("metrics.txt");
        fs::write(&path, report)?;
        written.push(path);
        let path = out_dir.join("metrics_per_class.csv");
        fs::write(&path, metrics.per_class_csv(&config.label_names))?;
        written.push(path);
        Some((eval, metrics))
    };

    let mut output = PipelineOutput {
        config: config.clone(),
        map,
        frames: reports,
        extracted: points.len(),
        evaluation,
        timings,
        written,
    };
    let path = out_dir.join("summary.txt");
    fs::write(&path, run_summary(&output))?;
    output.written.push(path);
    Ok(output)
}

/// Human-readable `key=value` run summary with stage timings.
pub fn run_summary(out: &PipelineOutput) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "frames={}", out.frames.len());
    let _ = writeln!(s, "points={}", out.frames.iter().map(|f| f.points).sum::<usize>());
    let _ = writeln!(s, "voxels={}", out.map.len());
    let _ = writeln!(s, "extracted_voxels={}", out.extracted);
    let _ = writeln!(s, "backend={}", out.config.backend);
    let _ = writeln!(s, "precision={}", out.config.precision);
    let _ = writeln!(s, "iterations={}", out.config.crf.iterations);
    let _ = writeln!(s, "voxel_resolution={}", out.config.voxel_resolution);
    let t = &out.timings;
    for (k, d) in [
        ("load", t.load),
        ("crf", t.crf),
        ("projection", t.projection),
        ("fusion", t.fusion),
        ("evaluation", t.evaluation),
        ("output", t.output),
    ] {
        let _ = writeln!(s, "time_{k}_s={:.4}", d.as_secs_f64());
    }
    if let Some(acc) = out.mean_frame_accuracy() {
        let _ = writeln!(s, "mean_frame_pixel_accuracy={acc:.6}");
    }
    if let Some((eval, m)) = &out.evaluation {
        let _ = writeln!(s, "fused_pixel_accuracy={:.6}", m.pixel_accuracy);
        let _ = writeln!(s, "coverage={:.6}", eval.coverage());
    }
    for f in &out.frames {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "frame {} points={} unary_accuracy={} crf_accuracy={}",
            f.frame_id,
            f.points,
            fmt(f.unary_accuracy),
            fmt(f.crf_accuracy)
        );
    }
    s
}
