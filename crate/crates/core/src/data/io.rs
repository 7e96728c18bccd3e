use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    PlyAscii,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Option<CloudFormat> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "xyz" | "txt" => Some(CloudFormat::Xyz),
            "ply" => Some(CloudFormat::PlyAscii),
            _ => None,
        }
    }
}

/// Loads a cloud, inferring the format from the extension when `format` is
/// `None`.
pub fn load_cloud(path: &Path, format: Option<CloudFormat>) -> Result<PointCloud> {
    let format = format.or_else(|| CloudFormat::from_path(path)).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: "unknown point-cloud format (expected .xyz or .ply)".into(),
    })?;
    match format {
        CloudFormat::Xyz => load_xyz(path),
        CloudFormat::PlyAscii => load_ply(path),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_point(path: &Path, line: usize, fields: &[&str]) -> Result<Point> {
    let err = |message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut p = [0.0; 3];
    for (i, f) in fields.iter().enumerate() {
        let v: f64 = f.parse().map_err(|_| err(format!("`{f}` is not a number")))?;
        if !v.is_finite() {
            return Err(err(format!("non-finite coordinate `{f}`")));
        }
        p[i] = v;
    }
    Ok(p)
}

/// One `x y z` triple per line; blank lines and `#` comments are skipped.
pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    let text = read(path)?;
    let mut pts = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        pts.push(parse_point(path, i + 1, &fields)?);
    }
    if pts.is_empty() {
        return Err(Error::Parse { path: path.to_path_buf(), line: 0, message: "no points".into() });
    }
    PointCloud::new(pts)
}

struct Element {
    name: String,
    count: usize,
    props: Vec<String>,
}

/// ASCII PLY with `x`, `y`, `z` properties on the vertex element. Other
/// properties and elements are skipped; list properties are only allowed on
/// non-vertex elements.
pub fn load_ply(path: &Path) -> Result<PointCloud> {
    let text = read(path)?;
    let err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(err(1, "missing `ply` magic".into())),
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_seen = false;
    loop {
        let Some((i, raw)) = lines.next() else { return Err(err(0, "header never ends".into())) };
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => format_seen = true,
            ["format", other, ..] => return Err(err(i + 1, format!("unsupported format `{other}`"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count.parse().map_err(|_| err(i + 1, format!("bad element count `{count}`")))?;
                elements.push(Element { name: name.to_string(), count, props: vec![] });
            }
            ["property", "list", .., name] => {
                let e = elements.last_mut().ok_or_else(|| err(i + 1, "property before element".into()))?;
                if e.name == "vertex" {
                    return Err(err(i + 1, "list property on vertex element".into()));
                }
                e.props.push(name.to_string());
            }
            ["property", _, name] => {
                let e = elements.last_mut().ok_or_else(|| err(i + 1, "property before element".into()))?;
                e.props.push(name.to_string());
            }
            ["end_header"] => break,
            _ => return Err(err(i + 1, format!("unrecognized header line `{raw}`"))),
        }
    }
    if !format_seen {
        return Err(err(0, "missing `format ascii 1.0` line".into()));
    }
    let mut pts = Vec::new();
    for e in &elements {
        if e.name != "vertex" {
            for _ in 0..e.count {
                lines.next().ok_or_else(|| err(0, format!("file ends inside element `{}`", e.name)))?;
            }
            continue;
        }
        let idx: Vec<usize> = ["x", "y", "z"]
            .iter()
            .map(|axis| e.props.iter().position(|p| p == axis).ok_or_else(|| err(0, format!("vertex has no `{axis}` property"))))
            .collect::<Result<_>>()?;
        for _ in 0..e.count {
            let (i, raw) = lines.next().ok_or_else(|| err(0, "file ends inside vertex element".into()))?;
            let toks: Vec<&str> = raw.split_whitespace().collect();
            if toks.len() != e.props.len() {
                return Err(err(i + 1, format!("expected {} values, found {}", e.props.len(), toks.len())));
            }
            pts.push(parse_point(path, i + 1, &[toks[idx[0]], toks[idx[1]], toks[idx[2]]])?);
        }
        break;
    }
    if pts.is_empty() {
        return Err(err(0, "no vertices".into()));
    }
    PointCloud::new(pts)
}

/// Writes `x y z` lines with 17 significant digits, enough to parse back to
/// the identical `f64`.
pub fn save_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = String::with_capacity(cloud.len() * 72);
    for p in cloud.points() {
        writeln!(out, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]).expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
