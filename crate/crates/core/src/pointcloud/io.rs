//! ASCII `.xyz` and PLY point files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Point, PointCloud, Source};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    /// One `x y z` triple per line.
    Xyz,
    /// ASCII PLY with float x, y, z vertex properties.
    Ply,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("xyz") | Some("txt") => Ok(CloudFormat::Xyz),
            Some("ply") => Ok(CloudFormat::Ply),
            _ => Err(Error::usage(format!(
                "cannot infer cloud format from {} (expected .xyz or .ply)",
                path.display()
            ))),
        }
    }
}

/// `{count}` is replaced by the vertex count.
pub const PLY_HEADER_TEMPLATE: &str = "ply\nformat ascii 1.0\nelement vertex {count}\nproperty float x\nproperty float y\nproperty float z\nend_header\n";

/// Nine significant digits.
fn fmt_coord(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn write_cloud(path: &Path, pc: &PointCloud, format: CloudFormat) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    if format == CloudFormat::Ply {
        w.write_all(PLY_HEADER_TEMPLATE.replace("{count}", &pc.len().to_string()).as_bytes())?;
    }
    for p in pc.points() {
        writeln!(w, "{} {} {}", fmt_coord(p[0]), fmt_coord(p[1]), fmt_coord(p[2]))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let perr = |line: usize, msg: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        msg,
    };
    let (body_start, expected, xyz_cols, ncols) = match format {
        CloudFormat::Xyz => (0, None, [0, 1, 2], None),
        CloudFormat::Ply => {
            let h = parse_ply_header(&lines).map_err(|(l, m)| perr(l, m))?;
            (h.body_start, Some(h.vertex_count), h.xyz_cols, Some(h.property_count))
        }
    };

    let mut pts: Vec<Point> = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(body_start) {
        if expected.is_some_and(|n| pts.len() == n) {
            break;
        }
        let trimmed = line.trim();
        if trimmed.is_empty() || (format == CloudFormat::Xyz && trimmed.starts_with('#')) {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let want = ncols.unwrap_or(3);
        if fields.len() < want {
            return Err(perr(i + 1, format!("expected {want} values, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (k, &col) in xyz_cols.iter().enumerate() {
            p[k] = fields[col]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| perr(i + 1, format!("bad coordinate {:?}", fields[col])))?;
        }
        pts.push(p);
    }
    if let Some(n) = expected {
        if pts.len() != n {
            return Err(perr(lines.len(), format!("header declares {n} vertices, found {}", pts.len())));
        }
    }
    PointCloud::new(pts, Source::Unknown)
}

struct PlyHeader {
    body_start: usize,
    vertex_count: usize,
    property_count: usize,
    xyz_cols: [usize; 3],
}

fn parse_ply_header(lines: &[&str]) -> std::result::Result<PlyHeader, (usize, String)> {
    if lines.first().map(|l| l.trim()) != Some("ply") {
        return Err((1, "missing 'ply' magic line".into()));
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    for (i, raw) in lines.iter().enumerate().skip(1) {
        let line = raw.trim();
        let mut it = line.split_whitespace();
        match it.next() {
            Some("format") => {
                if it.next() != Some("ascii") {
                    return Err((i + 1, "only ascii PLY is supported".into()));
                }
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = it.next();
                let count = it.next().and_then(|c| c.parse::<usize>().ok());
                in_vertex = name == Some("vertex");
                if in_vertex {
                    vertex_count = Some(count.ok_or((i + 1, "bad vertex count".to_string()))?);
                } else if vertex_count.is_none() {
                    return Err((i + 1, "elements before vertex are not supported".into()));
                }
            }
            Some("property") => {
                if in_vertex {
                    let name = it.last().ok_or((i + 1, "property without name".to_string()))?;
                    props.push(name.to_string());
                }
            }
            Some("end_header") => {
                let vertex_count = vertex_count.ok_or((i + 1, "no vertex element".to_string()))?;
                let col = |n: &str| {
                    props
                        .iter()
                        .position(|p| p == n)
                        .ok_or((i + 1, format!("vertex property {n} missing")))
                };
                return Ok(PlyHeader {
                    body_start: i + 1,
                    vertex_count,
                    property_count: props.len(),
                    xyz_cols: [col("x")?, col("y")?, col("z")?],
                });
            }
            Some(other) => return Err((i + 1, format!("unexpected header keyword {other:?}"))),
        }
    }
    Err((lines.len(), "missing end_header".into()))
}
