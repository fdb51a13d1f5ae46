use std::fs;
use std::path::Path;

use semfuse::crf::{map_labeling, LabelDistributionImage, LabelImage};
use semfuse::fusion::LIKELIHOOD_FLOOR;
use semfuse::pipeline::*;
use semfuse::projection::{back_project, CameraIntrinsics, Pose};
use semfuse::{DepthImage, Error, RgbImage};

const IDENTITY: &str = "1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 1";

/// A 4x5 frame at 1-2 m with three labels and one invalid depth pixel.
fn write_small_frame(dir: &Path, one_hot: bool) -> LabelDistributionImage<f64> {
    let (h, w, l) = (4, 5, 3);
    let rgb = RgbImage::new(h, w, (0..h * w).map(|i| [(i * 10) as u8, 50, 200]).collect()).unwrap();
    let depth = DepthImage::new(h, w, (0..h * w).map(|i| if i == 7 { 0 } else { 1000 + 50 * i as u16 }).collect()).unwrap();
    let mut data = Vec::new();
    for i in 0..h * w {
        let favored = (i * 7) % l;
        for k in 0..l {
            data.push(match (one_hot, k == favored) {
                (true, true) => 1.0,
                (true, false) => 0.0,
                (false, true) => 0.5,
                (false, false) => 0.25,
            });
        }
    }
    let probs = LabelDistributionImage::new(h, w, l, data).unwrap();
    write_ppm(dir.join("rgb.ppm"), &rgb).unwrap();
    write_depth_pgm(dir.join("depth.pgm"), &depth).unwrap();
    write_unary(dir.join("unary.unry"), &probs).unwrap();
    probs
}

fn small_header(extra: &str) -> String {
    format!("labels=3\nfx=4\nfy=4\ncx=2\ncy=1.5\nvoxel_resolution=0.001\n{extra}")
}

fn run(dir: &Path, manifest: &str) -> semfuse::Result<PipelineOutput> {
    let m = dir.join("manifest.txt");
    fs::write(&m, manifest).unwrap();
    let out = dir.join("out").display().to_string();
    run_pipeline(&m, &[("output".into(), out)])
}

#[test]
fn inert_crf_keeps_unary_argmax() {
    let dir = tempfile::tempdir().unwrap();
    let probs = write_small_frame(dir.path(), true);
    let text = format!("{}w_bilateral=0\nw_spatial=0\nf rgb.ppm depth.pgm unary.unry {IDENTITY}\n", small_header(""));
    fs::write(dir.path().join("m.txt"), &text).unwrap();
    let m = load_manifest(dir.path().join("m.txt")).unwrap();
    let frame = run_frame(&m.frames[0], &m.config).unwrap();
    let expected = map_labeling(&probs);
    let valid: Vec<u8> = expected.data().iter().enumerate().filter(|(i, _)| *i != 7).map(|(_, &l)| l).collect();
    let got: Vec<u8> = (0..frame.cloud.len()).map(|i| frame.cloud.hard_label(i).0).collect();
    assert_eq!(got, valid);
}

#[test]
fn identity_pose_keeps_camera_coordinates() {
    let dir = tempfile::tempdir().unwrap();
    write_small_frame(dir.path(), false);
    fs::write(dir.path().join("m.txt"), format!("{}f rgb.ppm depth.pgm unary.unry {IDENTITY}\n", small_header(""))).unwrap();
    let m = load_manifest(dir.path().join("m.txt")).unwrap();
    let frame = run_frame(&m.frames[0], &m.config).unwrap();
    let grid = back_project(&frame.inputs.depth, &m.config.intrinsics).unwrap();
    let camera: Vec<[f64; 3]> = grid.points.iter().zip(&grid.valid).filter(|(_, &v)| v).map(|(p, _)| *p).collect();
    assert_eq!(frame.cloud.points, camera);
}

#[test]
fn one_frame_map_is_the_floored_frame_distribution() {
    let dir = tempfile::tempdir().unwrap();
    write_small_frame(dir.path(), false);
    let out = run(dir.path(), &format!("{}f rgb.ppm depth.pgm unary.unry {IDENTITY}\n", small_header(""))).unwrap();
    let m = load_manifest(dir.path().join("manifest.txt")).unwrap();
    let frame = run_frame(&m.frames[0], &m.config).unwrap();
    assert_eq!(out.map.len(), frame.cloud.len());
    let mut dist = vec![0.0; 3];
    for i in 0..frame.cloud.len() {
        frame.cloud.distribution_into(i, &mut dist);
        let floored: Vec<f64> = dist.iter().map(|p| p.max(LIKELIHOOD_FLOOR)).collect();
        let s: f64 = floored.iter().sum();
        let voxel = out.map.voxel_at(frame.cloud.points[i]).unwrap();
        for (a, b) in voxel.posterior().iter().zip(&floored) {
            assert!((a - b / s).abs() < 1e-12);
        }
    }
}

#[test]
fn listing_a_frame_twice_squares_its_evidence() {
    let dir = tempfile::tempdir().unwrap();
    write_small_frame(dir.path(), false);
    let line = format!("f rgb.ppm depth.pgm unary.unry {IDENTITY}\n");
    let once = run(dir.path(), &format!("{}{line}", small_header(""))).unwrap();
    let twice = run(dir.path(), &format!("{}{line}{line}", small_header(""))).unwrap();
    for ((i1, v1), (i2, v2)) in once.map.voxels().into_iter().zip(twice.map.voxels()) {
        assert_eq!(i1, i2);
        assert_eq!(v2.observations(), 2 * v1.observations());
        let p1 = v1.posterior();
        let sq: Vec<f64> = p1.iter().map(|p| p * p).collect();
        let s: f64 = sq.iter().sum();
        for (a, b) in v2.posterior().iter().zip(&sq) {
            assert!((a - b / s).abs() < 1e-12);
        }
    }
}

fn small_synthetic(dir: &Path, seed: u64, epsilon: f64) -> std::path::PathBuf {
    let mut spec = SyntheticSceneSpec::desk(seed);
    spec.orbit.frames = 5;
    spec.width = 48;
    spec.height = 36;
    spec.intrinsics = CameraIntrinsics::new(37.5, 37.5, 23.5, 17.5, 0.001).unwrap();
    spec.epsilon = epsilon;
    generate_synthetic(&spec, dir).unwrap()
}

fn run_into(manifest: &Path, out: &Path, extra: &[(&str, &str)]) -> PipelineOutput {
    let mut overrides = vec![("output".to_string(), out.display().to_string())];
    overrides.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    run_pipeline(manifest, &overrides).unwrap()
}

#[test]
fn outputs_are_deterministic_for_both_backends() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_synthetic(&dir.path().join("scene"), 4, 0.2);
    for backend in ["exact", "lattice"] {
        let a = dir.path().join(format!("{backend}-a"));
        let b = dir.path().join(format!("{backend}-b"));
        run_into(&m, &a, &[("backend", backend)]);
        run_into(&m, &b, &[("backend", backend)]);
        for f in ["map.ply", "metrics.txt", "metrics_per_class.csv", "labels/frame_002.pgm"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{backend} {f}");
        }
    }
}

#[test]
fn frame_order_does_not_change_the_map() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_synthetic(&dir.path().join("scene"), 5, 0.3);
    let forward = run_into(&m, &dir.path().join("fwd"), &[]);
    let text = fs::read_to_string(&m).unwrap();
    let (header, frames): (Vec<&str>, Vec<&str>) = text.lines().partition(|l| l.contains('='));
    let reversed = format!("{}\n{}\n", header.join("\n"), frames.iter().rev().cloned().collect::<Vec<_>>().join("\n"));
    let m2 = dir.path().join("scene").join("reversed.txt");
    fs::write(&m2, reversed).unwrap();
    let backward = run_into(&m2, &dir.path().join("rev"), &[]);
    assert_eq!(forward.map.len(), backward.map.len());
    let mut worst: f64 = 0.0;
    for ((i1, v1), (i2, v2)) in forward.map.voxels().into_iter().zip(backward.map.voxels()) {
        assert_eq!(i1, i2);
        for (a, b) in v1.posterior().iter().zip(v2.posterior()) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-9, "{worst:e}");
}

#[test]
fn every_ply_reparses_with_matching_counts() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_synthetic(&dir.path().join("scene"), 6, 0.2);
    let out_dir = dir.path().join("out");
    let out = run_into(&m, &out_dir, &[("per_frame_ply", "true"), ("min_observations", "2")]);
    let map = read_ply(out_dir.join("map.ply")).unwrap();
    assert_eq!(map.len(), out.extracted);
    assert_eq!(out.extracted, out.map.extract(2, 0.0).len());
    for f in &out.frames {
        let cloud = read_ply(out_dir.join("frames").join(format!("{}.ply", f.frame_id))).unwrap();
        assert_eq!(cloud.len(), f.points);
    }
}

#[test]
fn crf_beats_raw_unaries_on_a_noisy_frame() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SyntheticSceneSpec::desk(7);
    spec.orbit.frames = 2;
    let m = generate_synthetic(&spec, dir.path()).unwrap();
    let manifest = load_manifest(&m).unwrap();
    let mut config = manifest.config;
    config.set("iterations", "10").unwrap();
    let frame = run_frame(&manifest.frames[0], &config).unwrap();
    let r = &frame.report;
    assert!(r.crf_accuracy.unwrap() > r.unary_accuracy.unwrap(), "{r:?}");
}

#[test]
fn low_resolution_unaries_are_resampled() {
    let dir = tempfile::tempdir().unwrap();
    write_small_frame(dir.path(), false);
    let coarse = LabelDistributionImage::new(2, 2, 3, [0.5, 0.25, 0.25].repeat(4)).unwrap();
    write_unary(dir.path().join("coarse.unry"), &coarse).unwrap();
    let truth = LabelImage::new(2, 2, 3, vec![0, 0, 1, 255]).unwrap();
    write_label_pgm(dir.path().join("truth.pgm"), &truth).unwrap();
    let out = run(dir.path(), &format!("{}f rgb.ppm depth.pgm coarse.unry truth.pgm {IDENTITY}\n", small_header(""))).unwrap();
    let (eval, _) = out.evaluation.unwrap();
    // Column 2 of 5 sits on the boundary and rounds into the ignored quadrant,
    // so 6 ignored pixels and the invalid-depth pixel drop out.
    assert_eq!(eval.evaluated, 13);
    assert_eq!(eval.missing, 0);
}

#[test]
fn failures_name_the_frame() {
    let dir = tempfile::tempdir().unwrap();
    write_small_frame(dir.path(), false);
    fs::write(dir.path().join("broken.unry"), b"UNRY\x01").unwrap();
    let text = format!(
        "{}good rgb.ppm depth.pgm unary.unry {IDENTITY}\nbad_frame rgb.ppm depth.pgm broken.unry {IDENTITY}\n",
        small_header("")
    );
    let err = run(dir.path(), &text).unwrap_err();
    assert!(matches!(&err, Error::Frame { frame_id, .. } if frame_id == "bad_frame"), "{err}");
    assert!(run(dir.path(), &small_header("")).is_err());
    let wrong_labels = format!("labels=4\nf rgb.ppm depth.pgm unary.unry {IDENTITY}\n");
    assert!(run(dir.path(), &wrong_labels).is_err());
}

#[test]
fn poses_move_clouds() {
    let dir = tempfile::tempdir().unwrap();
    write_small_frame(dir.path(), false);
    let shifted = "1 0 0 2 0 1 0 0 0 0 1 0 0 0 0 1";
    fs::write(dir.path().join("m.txt"), format!("{}f rgb.ppm depth.pgm unary.unry {shifted}\n", small_header(""))).unwrap();
    let m = load_manifest(dir.path().join("m.txt")).unwrap();
    assert_eq!(m.frames[0].pose, Pose::translation(2.0, 0.0, 0.0));
    let frame = run_frame(&m.frames[0], &m.config).unwrap();
    let grid = back_project(&frame.inputs.depth, &m.config.intrinsics).unwrap();
    assert_eq!(frame.cloud.points[0], [grid.points[0][0] + 2.0, grid.points[0][1], grid.points[0][2]]);
}
