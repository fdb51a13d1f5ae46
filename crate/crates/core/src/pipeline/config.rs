//! Run configuration as flat `key=value` pairs.
//!
//! The same syntax appears in manifest headers, `--config` files and the
//! parameter files written by training. Later assignments win. `labels`,
//! `label_names` and `label_colors` reset dependent tables, so they should
//! precede `label_colors` and `compatibility`.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::crf::CrfParams;
use crate::error::{Error, Result};
use crate::filtering::Backend;
use crate::fusion::DEFAULT_RESOLUTION;
use crate::projection::CameraIntrinsics;

/// The 23 material categories of the MINC database, in label order.
pub const MINC_LABELS: [&str; 23] = [
    "brick",
    "carpet",
    "ceramic",
    "fabric",
    "foliage",
    "food",
    "glass",
    "hair",
    "leather",
    "metal",
    "mirror",
    "other",
    "painted",
    "paper",
    "plastic",
    "polishedstone",
    "skin",
    "sky",
    "stone",
    "tile",
    "wallpaper",
    "water",
    "wood",
];

const MINC_COLORS: [[u8; 3]; 23] = [
    [178, 34, 34],
    [128, 0, 128],
    [240, 240, 230],
    [255, 105, 180],
    [34, 139, 34],
    [255, 165, 0],
    [135, 206, 250],
    [101, 67, 33],
    [139, 69, 19],
    [112, 128, 144],
    [192, 192, 255],
    [128, 128, 128],
    [255, 250, 205],
    [245, 245, 220],
    [0, 191, 255],
    [47, 79, 79],
    [255, 218, 185],
    [0, 0, 255],
    [105, 105, 105],
    [0, 128, 128],
    [218, 165, 32],
    [0, 0, 139],
    [160, 82, 45],
];

/// Scalar type used for CRF inference. Fusion always runs in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f32" | "single" => Ok(Precision::F32),
            "f64" | "double" => Ok(Precision::F64),
            other => Err(Error::config(format!("unknown precision `{other}` (f32|f64)"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub intrinsics: CameraIntrinsics,
    pub label_names: Vec<String>,
    pub label_colors: Vec<[u8; 3]>,
    pub crf: CrfParams<f64>,
    pub backend: Backend,
    pub precision: Precision,
    pub voxel_resolution: f64,
    pub min_observations: u64,
    pub min_confidence: f64,
    pub output_dir: PathBuf,
    pub per_frame_ply: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            intrinsics: CameraIntrinsics {
                fx: 525.0,
                fy: 525.0,
                cx: 319.5,
                cy: 239.5,
                depth_scale: 0.001,
            },
            label_names: MINC_LABELS.iter().map(|s| s.to_string()).collect(),
            label_colors: MINC_COLORS.to_vec(),
            crf: CrfParams::potts(MINC_LABELS.len()),
            backend: Backend::default(),
            precision: Precision::default(),
            voxel_resolution: DEFAULT_RESOLUTION,
            min_observations: 1,
            min_confidence: 0.0,
            output_dir: PathBuf::from("semfuse-out"),
            per_frame_ply: false,
            seed: 0,
        }
    }
}

/// Default names for `labels` classes: the MINC set when there are 23,
/// `label0`, `label1`, ... otherwise.
pub fn default_label_names(labels: usize) -> Vec<String> {
    if labels == MINC_LABELS.len() {
        MINC_LABELS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..labels).map(|i| format!("label{i}")).collect()
    }
}

/// MINC colors for 23 labels, evenly spaced hues otherwise.
pub fn default_label_colors(labels: usize) -> Vec<[u8; 3]> {
    if labels == MINC_COLORS.len() {
        return MINC_COLORS.to_vec();
    }
    (0..labels)
        .map(|i| {
            let h = 6.0 * i as f64 / labels as f64;
            let x = 1.0 - (h % 2.0 - 1.0).abs();
            let (r, g, b) = match h as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [r, g, b].map(|v: f64| (v * 230.0 + 25.0).round() as u8)
        })
        .collect()
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| parse(key, v))
        .collect()
}

fn parse_color(key: &str, value: &str) -> Result<[u8; 3]> {
    let hex = value.trim().trim_start_matches('#');
    let bad = || Error::config(format!("{key}: `{value}` is not an rrggbb color"));
    if hex.len() != 6 {
        return Err(bad());
    }
    let byte = |k: usize| u8::from_str_radix(&hex[2 * k..2 * k + 2], 16).map_err(|_| bad());
    Ok([byte(0)?, byte(1)?, byte(2)?])
}

impl PipelineConfig {
    pub fn labels(&self) -> usize {
        self.label_names.len()
    }

    fn reset_labels(&mut self, names: Vec<String>) {
        let labels = names.len();
        let crf = CrfParams::potts(labels);
        self.crf = CrfParams {
            kernel_weights: self.crf.kernel_weights,
            theta_alpha: self.crf.theta_alpha,
            theta_beta: self.crf.theta_beta,
            theta_gamma: self.crf.theta_gamma,
            iterations: self.crf.iterations,
            ..crf
        };
        self.label_colors = default_label_colors(labels);
        self.label_names = names;
    }

    /// Applies one assignment. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        match key {
            "fx" => self.intrinsics.fx = parse(key, value)?,
            "fy" => self.intrinsics.fy = parse(key, value)?,
            "cx" => self.intrinsics.cx = parse(key, value)?,
            "cy" => self.intrinsics.cy = parse(key, value)?,
            "depth_scale" => self.intrinsics.depth_scale = parse(key, value)?,
            "labels" => {
                let n: usize = parse(key, value)?;
                if n > 255 {
                    return Err(Error::config("at most 255 labels fit an 8-bit label map"));
                }
                self.reset_labels(default_label_names(n));
            }
            "label_names" => {
                let names: Vec<String> = value.split(',').map(|s| s.trim().to_string()).collect();
                if names.iter().any(|n| n.is_empty() || n.contains(char::is_whitespace)) {
                    return Err(Error::config("label names must be nonempty words"));
                }
                if names.len() > 255 {
                    return Err(Error::config("at most 255 labels fit an 8-bit label map"));
                }
                self.reset_labels(names);
            }
            "label_colors" => {
                self.label_colors = value
                    .split(',')
                    .map(|c| parse_color(key, c))
                    .collect::<Result<_>>()?
            }
            "iterations" => self.crf.iterations = parse(key, value)?,
            "w_bilateral" => self.crf.kernel_weights[0] = parse(key, value)?,
            "w_spatial" => self.crf.kernel_weights[1] = parse(key, value)?,
            "theta_alpha" => self.crf.theta_alpha = parse(key, value)?,
            "theta_beta" => self.crf.theta_beta = parse(key, value)?,
            "theta_gamma" => self.crf.theta_gamma = parse(key, value)?,
            "compatibility" => {
                self.crf.compatibility = if value == "potts" {
                    CrfParams::<f64>::potts(self.labels()).compatibility
                } else {
                    parse_list(key, value)?
                }
            }
            "backend" => self.backend = value.parse()?,
            "precision" => self.precision = value.parse()?,
            "voxel_resolution" => self.voxel_resolution = parse(key, value)?,
            "min_observations" => self.min_observations = parse(key, value)?,
            "min_confidence" => self.min_confidence = parse(key, value)?,
            "output" => self.output_dir = PathBuf::from(value),
            "per_frame_ply" => self.per_frame_ply = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` line; blank lines and `#` comments are skipped.
    pub fn set_line(&mut self, line: &str) -> Result<()> {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return Ok(());
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected key=value, found `{line}`")))?;
        self.set(key, value)
    }

    /// Parses a whole `key=value` document on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            self.set_line(line).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let labels = self.labels();
        if labels < 2 {
            return Err(Error::config(format!("need at least 2 labels, got {labels}")));
        }
        if self.label_colors.len() != labels {
            return Err(Error::config(format!(
                "{} label colors for {labels} labels",
                self.label_colors.len()
            )));
        }
        if self.crf.labels != labels {
            return Err(Error::config("CRF label count differs from the label table"));
        }
        self.crf.validate()?;
        self.intrinsics.validate()?;
        if !(self.voxel_resolution > 0.0) || !self.voxel_resolution.is_finite() {
            return Err(Error::config(format!(
                "voxel_resolution must be positive, got {}",
                self.voxel_resolution
            )));
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(Error::config(format!(
                "min_confidence must lie in [0, 1], got {}",
                self.min_confidence
            )));
        }
        Ok(())
    }

    /// Serializes every setting; [`PipelineConfig::apply_text`] reads it back.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let i = &self.intrinsics;
        let c = &self.crf;
        let _ = writeln!(out, "label_names={}", self.label_names.join(","));
        let colors: Vec<String> = self
            .label_colors
            .iter()
            .map(|[r, g, b]| format!("{r:02x}{g:02x}{b:02x}"))
            .collect();
        let _ = writeln!(out, "label_colors={}", colors.join(","));
        for (k, v) in [
            ("fx", i.fx),
            ("fy", i.fy),
            ("cx", i.cx),
            ("cy", i.cy),
            ("depth_scale", i.depth_scale),
        ] {
            let _ = writeln!(out, "{k}={v:?}");
        }
        let _ = writeln!(out, "iterations={}", c.iterations);
        let _ = writeln!(out, "w_bilateral={:?}", c.kernel_weights[0]);
        let _ = writeln!(out, "w_spatial={:?}", c.kernel_weights[1]);
        let _ = writeln!(out, "theta_alpha={:?}", c.theta_alpha);
        let _ = writeln!(out, "theta_beta={:?}", c.theta_beta);
        let _ = writeln!(out, "theta_gamma={:?}", c.theta_gamma);
        if c.compatibility == CrfParams::<f64>::potts(c.labels).compatibility {
            out.push_str("compatibility=potts\n");
        } else {
            let v: Vec<String> = c.compatibility.iter().map(|x| format!("{x:?}")).collect();
            let _ = writeln!(out, "compatibility={}", v.join(","));
        }
        let _ = writeln!(out, "backend={}", self.backend);
        let _ = writeln!(out, "precision={}", self.precision);
        let _ = writeln!(out, "voxel_resolution={:?}", self.voxel_resolution);
        let _ = writeln!(out, "min_observations={}", self.min_observations);
        let _ = writeln!(out, "min_confidence={:?}", self.min_confidence);
        let _ = writeln!(out, "per_frame_ply={}", self.per_frame_ply);
        let _ = writeln!(out, "seed={}", self.seed);
        out
    }
}
