//! ASCII PLY export of labeled points and a strict reader for it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::MapPoint;
use crate::projection::SemanticPointCloud;

const PROPERTIES: [&str; 8] = [
    "property float x",
    "property float y",
    "property float z",
    "property uchar red",
    "property uchar green",
    "property uchar blue",
    "property uchar label",
    "property float confidence",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlyVertex {
    pub position: [f32; 3],
    pub color: [u8; 3],
    pub label: u8,
    pub confidence: f32,
}

impl From<&MapPoint> for PlyVertex {
    fn from(p: &MapPoint) -> Self {
        PlyVertex {
            position: p.center.map(|c| c as f32),
            color: p.color,
            label: p.label,
            confidence: p.confidence as f32,
        }
    }
}

/// Hard-labeled vertices of a point cloud, one per point.
pub fn cloud_vertices(cloud: &SemanticPointCloud) -> Vec<PlyVertex> {
    (0..cloud.len())
        .map(|i| {
            let (label, confidence) = cloud.hard_label(i);
            PlyVertex {
                position: cloud.points[i].map(|c| c as f32),
                color: cloud.colors[i],
                label,
                confidence: confidence as f32,
            }
        })
        .collect()
}

pub fn encode_ply(vertices: &[PlyVertex]) -> String {
    let mut out = String::with_capacity(64 * vertices.len() + 256);
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", vertices.len());
    for p in PROPERTIES {
        out.push_str(p);
        out.push('\n');
    }
    out.push_str("end_header\n");
    for v in vertices {
        let [x, y, z] = v.position;
        let [r, g, b] = v.color;
        let _ = writeln!(out, "{x} {y} {z} {r} {g} {b} {} {}", v.label, v.confidence);
    }
    out
}

pub fn write_ply(path: impl AsRef<Path>, vertices: &[PlyVertex]) -> Result<()> {
    fs::write(path, encode_ply(vertices))?;
    Ok(())
}

/// Parses exactly the layout produced by [`encode_ply`]; anything else is an
/// error naming the offending line.
pub fn decode_ply(path: &Path, text: &str) -> Result<Vec<PlyVertex>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let expect = |lines: &mut dyn Iterator<Item = (usize, &str)>, want: &str| match lines.next() {
        Some((_, l)) if l.trim_end() == want => Ok(()),
        Some((n, l)) => Err(parse_err(n, format!("expected `{want}`, found `{l}`"))),
        None => Err(parse_err(0, format!("file ends before `{want}`"))),
    };
    expect(&mut lines, "ply")?;
    expect(&mut lines, "format ascii 1.0")?;
    let (n, line) = lines.next().ok_or_else(|| parse_err(0, "missing element line".into()))?;
    let count: usize = line
        .strip_prefix("element vertex ")
        .and_then(|c| c.trim().parse().ok())
        .ok_or_else(|| parse_err(n, format!("expected `element vertex N`, found `{line}`")))?;
    for p in PROPERTIES.iter().chain(&["end_header"]) {
        expect(&mut lines, p)?;
    }

    let mut vertices = Vec::with_capacity(count);
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 8 {
            return Err(parse_err(n, format!("expected 8 values, found {}", tokens.len())));
        }
        let float = |k: usize| -> Result<f32> {
            tokens[k]
                .parse::<f32>()
                .map_err(|_| parse_err(n, format!("bad float `{}`", tokens[k])))
        };
        let byte = |k: usize| -> Result<u8> {
            tokens[k]
                .parse::<u8>()
                .map_err(|_| parse_err(n, format!("bad uchar `{}`", tokens[k])))
        };
        vertices.push(PlyVertex {
            position: [float(0)?, float(1)?, float(2)?],
            color: [byte(3)?, byte(4)?, byte(5)?],
            label: byte(6)?,
            confidence: float(7)?,
        });
    }
    if vertices.len() != count {
        return Err(parse_err(
            0,
            format!("header declares {count} vertices, body has {}", vertices.len()),
        ));
    }
    Ok(vertices)
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<Vec<PlyVertex>> {
    let path = path.as_ref();
    decode_ply(path, &fs::read_to_string(path)?)
}
