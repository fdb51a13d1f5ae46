//! Frame manifests: a `key=value` configuration header followed by one line
//! per frame, `frame_id rgb depth unary [truth] p00 ... p33`, where the 16
//! trailing numbers are the row-major camera-to-world pose.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::projection::Pose;

use super::config::PipelineConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_id: String,
    pub rgb_path: PathBuf,
    pub depth_path: PathBuf,
    pub unary_path: PathBuf,
    pub truth_path: Option<PathBuf>,
    pub pose: Pose,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub path: PathBuf,
    pub config: PipelineConfig,
    pub frames: Vec<FrameRecord>,
}

const POSE_FIELDS: usize = 16;

/// Parses manifest text. Relative file paths are resolved against `base`.
/// File existence is not checked here.
pub fn parse_manifest(path: &Path, text: &str, base: &Path) -> Result<(PipelineConfig, Vec<FrameRecord>)> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let resolve = |p: &str| {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut config = PipelineConfig::default();
    let mut frames = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let n = n + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.contains('=') {
            if !frames.is_empty() {
                return Err(err(n, "configuration line after the first frame".into()));
            }
            config.set_line(line).map_err(|e| err(n, e.to_string()))?;
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let has_truth = match tokens.len() {
            20 => false,
            21 => true,
            k => {
                return Err(err(
                    n,
                    format!(
                        "expected `frame_id rgb depth unary [truth]` and {POSE_FIELDS} pose values, found {k} fields"
                    ),
                ))
            }
        };
        let pose_start = tokens.len() - POSE_FIELDS;
        let values = tokens[pose_start..]
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| err(n, format!("bad pose value `{t}`"))))
            .collect::<Result<Vec<f64>>>()?;
        let pose = Pose::from_row_major(&values).map_err(|e| err(n, e.to_string()))?;
        frames.push(FrameRecord {
            frame_id: tokens[0].to_string(),
            rgb_path: resolve(tokens[1]),
            depth_path: resolve(tokens[2]),
            unary_path: resolve(tokens[3]),
            truth_path: has_truth.then(|| resolve(tokens[4])),
            pose,
        });
    }
    Ok((config, frames))
}

/// Reads a manifest and checks that every referenced file exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let (config, frames) = parse_manifest(path, &text, base)?;
    for f in &frames {
        for p in [&f.rgb_path, &f.depth_path, &f.unary_path]
            .into_iter()
            .chain(f.truth_path.as_ref())
        {
            if !p.is_file() {
                return Err(Error::MissingFile(p.clone()).in_frame(&f.frame_id));
            }
        }
    }
    Ok(Manifest {
        path: path.to_path_buf(),
        config,
        frames,
    })
}

/// Renders a manifest; paths are written as given.
pub fn format_manifest(config: &PipelineConfig, frames: &[FrameRecord]) -> String {
    let mut out = config.to_key_value();
    for f in frames {
        let _ = write!(
            out,
            "{} {} {} {}",
            f.frame_id,
            f.rgb_path.display(),
            f.depth_path.display(),
            f.unary_path.display()
        );
        if let Some(t) = &f.truth_path {
            let _ = write!(out, " {}", t.display());
        }
        for v in f.pose.to_row_major() {
            let _ = write!(out, " {v:?}");
        }
        out.push('\n');
    }
    out
}
