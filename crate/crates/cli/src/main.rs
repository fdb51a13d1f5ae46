use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use semfuse::crf::{
    build_features, crf_energy, map_labeling, train_crf_params, unary_from_probabilities,
    TrainConfig, TrainingSample,
};
use semfuse::filtering::Backend;
use semfuse::metrics::ConfusionMatrix;
use semfuse::pipeline::{
    generate_synthetic, load_frame, load_manifest, piecewise_constant_scene, read_label_pgm,
    read_ppm, read_unary, run_frames, segment, write_label_pgm, write_unary, PipelineConfig,
    SyntheticSceneSpec,
};

#[derive(Parser)]
#[command(name = "semfuse", version, about = "Dense-CRF segmentation and semantic voxel fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Flags override `--config`, which
/// overrides a manifest header.
#[derive(Args, Clone, Default)]
struct Common {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// CRF filtering backend
    #[arg(long, value_parser = ["exact", "lattice"])]
    backend: Option<String>,
    /// Mean-field iterations (at least 1)
    #[arg(long)]
    iterations: Option<usize>,
    /// Voxel edge length in meters
    #[arg(long = "voxel-res")]
    voxel_res: Option<f64>,
    /// Minimum observations for a voxel to be exported
    #[arg(long = "min-obs")]
    min_obs: Option<u64>,
    /// Minimum posterior confidence for a voxel to be exported
    #[arg(long = "min-conf")]
    min_conf: Option<f64>,
    /// Random seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output location
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    /// Configuration assignments in application order.
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut pairs = Vec::new();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading configuration {}", path.display()))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').with_context(|| {
                    format!("{}:{}: expected key=value", path.display(), n + 1)
                })?;
                pairs.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        push("backend", self.backend.clone());
        push("iterations", self.iterations.map(|v| v.to_string()));
        push("voxel_resolution", self.voxel_res.map(|v| v.to_string()));
        push("min_observations", self.min_obs.map(|v| v.to_string()));
        push("min_confidence", self.min_conf.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        Ok(pairs)
    }

    fn apply(&self, config: &mut PipelineConfig) -> Result<()> {
        for (k, v) in self.overrides()? {
            config.set(&k, &v)?;
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Refine one frame's unaries with the CRF and write the label map.
    Segment {
        /// RGB image (binary PPM)
        #[arg(long)]
        rgb: PathBuf,
        /// Unary probabilities (UNRY)
        #[arg(long)]
        unary: PathBuf,
        /// Also report the CRF energy of the unary and CRF labelings
        /// (quadratic in the pixel count)
        #[arg(long)]
        energy: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run the full pipeline over a manifest.
    Fuse {
        /// Sequence manifest
        #[arg(long)]
        manifest: PathBuf,
        /// Write one PLY per frame as well
        #[arg(long)]
        per_frame_ply: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score predicted label maps against ground truth.
    Metrics {
        /// Predicted label PGMs
        #[arg(long, required = true, num_args = 1..)]
        pred: Vec<PathBuf>,
        /// Ground-truth label PGMs, paired with --pred in order
        #[arg(long, required = true, num_args = 1..)]
        truth: Vec<PathBuf>,
        /// Label count when no --config is given
        #[arg(long)]
        labels: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic RGB-D sequence with corrupted unaries.
    Synth {
        /// Probability of a wrong favored label per pixel
        #[arg(long, default_value_t = 0.2)]
        epsilon: f64,
        /// Probability mass on the favored label
        #[arg(long, default_value_t = 0.6)]
        confidence: f64,
        /// Frames along the camera orbit
        #[arg(long, default_value_t = 20)]
        frames: usize,
        /// Image width in pixels
        #[arg(long, default_value_t = 128)]
        width: usize,
        /// Image height in pixels
        #[arg(long, default_value_t = 96)]
        height: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Learn kernel weights and compatibilities from a labeled manifest.
    TrainCrf {
        /// Manifest whose frames carry ground truth
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        /// Per-image gradient descent step size
        #[arg(long = "learning-rate", default_value_t = 0.5)]
        learning_rate: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Time both filtering backends and lattice inference.
    Bench {
        /// Square image sizes for the backend sweep
        #[arg(long, value_delimiter = ',', default_value = "32,64")]
        sizes: Vec<usize>,
        /// Label count (value channels)
        #[arg(long, default_value_t = 23)]
        labels: usize,
        /// Image size of the inference timing
        #[arg(long, default_value_t = 224)]
        inference_size: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Segment {
            rgb,
            unary,
            energy,
            common,
        } => cmd_segment(&rgb, &unary, energy, &common),
        Command::Fuse {
            manifest,
            per_frame_ply,
            common,
        } => cmd_fuse(&manifest, per_frame_ply, &common),
        Command::Metrics {
            pred,
            truth,
            labels,
            common,
        } => cmd_metrics(&pred, &truth, labels, &common),
        Command::Synth {
            epsilon,
            confidence,
            frames,
            width,
            height,
            common,
        } => cmd_synth(epsilon, confidence, frames, width, height, &common),
        Command::TrainCrf {
            manifest,
            epochs,
            learning_rate,
            common,
        } => cmd_train(&manifest, epochs, learning_rate, &common),
        Command::Bench {
            sizes,
            labels,
            inference_size,
            common,
        } => cmd_bench(&sizes, labels, inference_size, &common),
    }
}

fn out_dir(common: &Common, default: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn cmd_segment(rgb: &Path, unary: &Path, energy: bool, common: &Common) -> Result<()> {
    let rgb = read_ppm(rgb)?;
    let probs = read_unary(unary)?;
    let mut config = PipelineConfig::default();
    if common.config.is_none() && probs.labels() != config.labels() {
        config.set("labels", &probs.labels().to_string())?;
    }
    common.apply(&mut config)?;
    config.validate()?;
    ensure!(
        probs.labels() == config.labels(),
        "unary has {} labels, configuration has {}",
        probs.labels(),
        config.labels()
    );
    let start = Instant::now();
    let q = segment(&rgb, &probs, &config.crf, config.backend, config.precision)?;
    let elapsed = start.elapsed().as_secs_f64();
    let labels = map_labeling(&q);

    let dir = out_dir(common, "segment-out")?;
    write_label_pgm(dir.join("labels.pgm"), &labels)?;
    write_unary(dir.join("marginals.unry"), &q)?;
    let mut report = format!(
        "height={}\nwidth={}\nlabels={}\nbackend={}\niterations={}\ninference_s={elapsed:.4}\n",
        q.height(),
        q.width(),
        q.labels(),
        config.backend,
        config.crf.iterations
    );
    if energy {
        let unary = unary_from_probabilities(&probs)?;
        let features = build_features(&rgb, &config.crf)?;
        let e_unary = crf_energy(&map_labeling(&probs), &unary, &features, &config.crf)?;
        let e_crf = crf_energy(&labels, &unary, &features, &config.crf)?;
        report.push_str(&format!("energy_unary_argmax={e_unary}\nenergy_crf={e_crf}\n"));
    }
    fs::write(dir.join("segment.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn cmd_fuse(manifest: &Path, per_frame_ply: bool, common: &Common) -> Result<()> {
    let m = load_manifest(manifest)?;
    let mut config = m.config;
    common.apply(&mut config)?;
    if per_frame_ply {
        config.per_frame_ply = true;
    }
    if let Some(dir) = &common.out {
        config.output_dir = dir.clone();
    }
    let output = run_frames(&m.frames, &config)?;
    print!("{}", semfuse::pipeline::run_summary(&output));
    if let Some((_, metrics)) = &output.evaluation {
        print!("{}", metrics.to_key_value());
    }
    Ok(())
}

fn cmd_metrics(pred: &[PathBuf], truth: &[PathBuf], labels: Option<usize>, common: &Common) -> Result<()> {
    ensure!(
        pred.len() == truth.len(),
        "{} prediction files but {} truth files",
        pred.len(),
        truth.len()
    );
    let mut config = PipelineConfig::default();
    if let Some(l) = labels {
        config.set("labels", &l.to_string())?;
    }
    common.apply(&mut config)?;
    config.validate()?;
    let l = config.labels();
    let mut cm = ConfusionMatrix::new(l);
    let mut unpredicted = 0;
    for (p, t) in pred.iter().zip(truth) {
        let p_img = read_label_pgm(p, l)?;
        let t_img = read_label_pgm(t, l)?;
        unpredicted += cm
            .accumulate(&p_img, &t_img)
            .with_context(|| format!("scoring {} against {}", p.display(), t.display()))?;
    }
    let metrics = cm.compute_metrics()?;
    let annotated = cm.total() + unpredicted;
    let report = format!(
        "{}coverage={:.6}\nunpredicted_pixels={unpredicted}\n",
        metrics.to_key_value(),
        cm.total() as f64 / annotated as f64
    );
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.txt"), &report)?;
        fs::write(dir.join("metrics_per_class.csv"), metrics.per_class_csv(&config.label_names))?;
    }
    print!("{report}");
    Ok(())
}

fn cmd_synth(epsilon: f64, confidence: f64, frames: usize, width: usize, height: usize, common: &Common) -> Result<()> {
    let mut spec = SyntheticSceneSpec::desk(common.seed.unwrap_or(0));
    spec.epsilon = epsilon;
    spec.confidence = confidence;
    spec.orbit.frames = frames;
    // Keep the field of view when the resolution changes.
    let scale = width as f64 / spec.width as f64;
    spec.intrinsics.fx *= scale;
    spec.intrinsics.fy *= scale;
    spec.intrinsics.cx = (width as f64 - 1.0) / 2.0;
    spec.intrinsics.cy = (height as f64 - 1.0) / 2.0;
    spec.width = width;
    spec.height = height;
    let dir = out_dir(common, "synth-out")?;
    let manifest = generate_synthetic(&spec, &dir)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_train(manifest: &Path, epochs: usize, learning_rate: f64, common: &Common) -> Result<()> {
    let m = load_manifest(manifest)?;
    let mut config = m.config;
    common.apply(&mut config)?;
    config.validate()?;
    let mut dataset = Vec::new();
    for record in &m.frames {
        let inputs = load_frame(record, &config)?;
        if let Some(truth) = inputs.truth {
            dataset.push(TrainingSample {
                rgb: inputs.rgb,
                probs: inputs.probs,
                truth,
            });
        }
    }
    if dataset.is_empty() {
        bail!("{} has no frames with ground truth", manifest.display());
    }
    let train = TrainConfig {
        learning_rate,
        epochs,
        seed: config.seed,
        backend: config.backend,
    };
    let outcome = train_crf_params(&dataset, &config.crf, &train)?;
    let p = &outcome.params;
    let compat: Vec<String> = p.compatibility.iter().map(|v| format!("{v:?}")).collect();
    let mut text = String::new();
    for (epoch, loss) in outcome.losses.iter().enumerate() {
        text.push_str(&format!("# epoch {epoch} loss {loss:.6}\n"));
    }
    text.push_str(&format!(
        "label_names={}\niterations={}\nw_bilateral={:?}\nw_spatial={:?}\ncompatibility={}\n",
        config.label_names.join(","),
        p.iterations,
        p.kernel_weights[0],
        p.kernel_weights[1],
        compat.join(",")
    ));
    let path = common.out.clone().unwrap_or_else(|| PathBuf::from("crf-params.txt"));
    fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    println!(
        "trained on {} images; loss {:.6} -> {:.6}; parameters in {}",
        dataset.len(),
        outcome.losses[0],
        outcome.best_loss,
        path.display()
    );
    Ok(())
}

fn best_of<F: FnMut() -> Result<()>>(runs: usize, mut f: F) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..runs {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

fn cmd_bench(sizes: &[usize], labels: usize, inference_size: usize, common: &Common) -> Result<()> {
    ensure!(!sizes.is_empty(), "no sizes given");
    let mut config = PipelineConfig::default();
    config.set("labels", &labels.to_string())?;
    common.apply(&mut config)?;
    config.validate()?;
    let seed = config.seed;
    let mut report = String::from("size,pixels,exact_s,lattice_s\n");
    let mut exact_times = Vec::new();
    for &s in sizes {
        let scene = piecewise_constant_scene(s, s, labels, 8, 0.2, 0.6, 8, seed)?;
        let features = build_features(&scene.rgb, &config.crf)?;
        let values = scene.probs.data();
        let mut times = [0.0; 2];
        for (slot, backend) in [Backend::Exact, Backend::Lattice].into_iter().enumerate() {
            times[slot] = best_of(3, || {
                let plans = features.plan(backend)?;
                for m in 0..2 {
                    plans.kernel(m).apply(values, labels)?;
                }
                Ok(())
            })?;
        }
        exact_times.push(times[0]);
        report.push_str(&format!("{s},{},{:.6},{:.6}\n", s * s, times[0], times[1]));
    }
    for k in 1..sizes.len() {
        let expected = (sizes[k] as f64 / sizes[k - 1] as f64).powi(4);
        let measured = exact_times[k] / exact_times[k - 1];
        let within = measured >= expected / 2.0 && measured <= expected * 2.0;
        report.push_str(&format!(
            "exact_ratio_{}_{}={measured:.2} expected={expected:.2} within_2x={within}\n",
            sizes[k - 1],
            sizes[k]
        ));
    }
    let n = inference_size;
    let scene = piecewise_constant_scene(n, n, labels, 8, 0.2, 0.6, 8, seed)?;
    let t = Instant::now();
    segment(&scene.rgb, &scene.probs, &config.crf, Backend::Lattice, config.precision)?;
    report.push_str(&format!(
        "lattice_inference_{n}x{n}_L{labels}_T{}_s={:.4}\n",
        config.crf.iterations,
        t.elapsed().as_secs_f64()
    ));
    if let Some(path) = &common.out {
        fs::write(path, &report).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{report}");
    Ok(())
}
