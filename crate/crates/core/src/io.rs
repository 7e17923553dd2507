//! Point clouds as ASCII XYZ or a PLY subset, CSV feature and metric
//! tables, and a plain-text parameter dump.
//!
//! All output is LF-terminated with '.' decimals and does not depend on the
//! locale, so equal inputs give equal bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::neighborhood::PointCloud;
use crate::training::segment::{NamedTensor, TrainReport};

/// Significant digits that make every `f64` round-trip.
pub const ROUND_TRIP_DIGITS: usize = 17;
/// Significant digits used for feature tables and metrics.
pub const TABLE_DIGITS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Auto,
    Xyz,
    Ply,
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(CloudFormat::Auto),
            "xyz" => Ok(CloudFormat::Xyz),
            "ply" => Ok(CloudFormat::Ply),
            other => Err(Error::Config(format!("unknown cloud format `{other}`"))),
        }
    }
}

/// Formats like C's `%.{digits}g`: fixed notation for moderate exponents,
/// scientific otherwise, trailing zeros removed.
pub fn format_sig(v: f64, digits: usize) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("scientific notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= digits as i32 {
        format!("{}e{exp}", trim_zeros(mantissa))
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    bytes_to_text(bytes)
}

fn bytes_to_text(bytes: Vec<u8>) -> Result<String> {
    String::from_utf8(bytes).map_err(|e| {
        let line = e.as_bytes()[..e.utf8_error().valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
        Error::parse(line, "invalid UTF-8")
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn format_for(path: &Path, head: &[u8]) -> CloudFormat {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(e) if e == "ply" => CloudFormat::Ply,
        Some(e) if e == "xyz" || e == "txt" || e == "pts" => CloudFormat::Xyz,
        _ if head.starts_with(b"ply") => CloudFormat::Ply,
        _ => CloudFormat::Xyz,
    }
}

pub fn read_cloud(path: impl AsRef<Path>, format: CloudFormat) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let format = match format {
        CloudFormat::Auto => format_for(path, text.as_bytes()),
        f => f,
    };
    match format {
        CloudFormat::Ply => parse_ply(&text),
        _ => parse_xyz(&text),
    }
}

/// Decodes bytes in the given format (`Auto` sniffs the header).
pub fn parse_cloud_bytes(bytes: &[u8], format: CloudFormat) -> Result<PointCloud> {
    let text = bytes_to_text(bytes.to_vec())?;
    match format {
        CloudFormat::Ply => parse_ply(&text),
        CloudFormat::Xyz => parse_xyz(&text),
        CloudFormat::Auto if text.starts_with("ply") => parse_ply(&text),
        CloudFormat::Auto => parse_xyz(&text),
    }
}

fn parse_coord(token: &str, line: usize) -> Result<f64> {
    let v: f64 = token
        .parse()
        .map_err(|_| Error::parse(line, format!("`{token}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("non-finite coordinate `{token}`")));
    }
    Ok(v)
}

fn parse_label(token: &str, line: usize) -> Result<u16> {
    if let Ok(v) = token.parse::<u16>() {
        return Ok(v);
    }
    // PLY files often store labels as floats.
    match token.parse::<f64>() {
        Ok(v) if v.fract() == 0.0 && (0.0..=u16::MAX as f64).contains(&v) => Ok(v as u16),
        _ => Err(Error::parse(line, format!("`{token}` is not a label in 0..=65535"))),
    }
}

fn build_cloud(coords: Vec<Vec3>, labels: Vec<u16>, labeled: bool) -> Result<PointCloud> {
    if coords.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let cloud = PointCloud::new(coords)?;
    if labeled {
        cloud.with_labels(labels)
    } else {
        Ok(cloud)
    }
}

/// `x y z [label]` per line; blank lines and `#` comments are skipped.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    let mut labeled: Option<bool> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(Error::parse(line_no, "expected 3 or 4 fields"));
        }
        let has_label = fields.len() == 4;
        match labeled {
            None => labeled = Some(has_label),
            Some(l) if l != has_label => {
                return Err(Error::parse(line_no, "label column present on some lines only"));
            }
            _ => {}
        }
        coords.push(Vec3::new(
            parse_coord(fields[0], line_no)?,
            parse_coord(fields[1], line_no)?,
            parse_coord(fields[2], line_no)?,
        ));
        if has_label {
            labels.push(parse_label(fields[3], line_no)?);
        }
    }
    build_cloud(coords, labels, labeled.unwrap_or(false))
}

struct PlyElement {
    name: String,
    count: usize,
    /// Scalar property names, or `None` for list properties.
    properties: Vec<Option<String>>,
}

const PLY_SCALARS: [&str; 16] = [
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double", "int8", "uint8", "int16", "uint16", "int32",
    "uint32", "float32", "float64",
];

/// ASCII PLY with a `vertex` element carrying `x`, `y`, `z` and optionally
/// `label`. Other properties and elements are skipped with a warning.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, _)) => return Err(Error::parse(n, "missing `ply` magic")),
        None => return Err(Error::EmptyCloud),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut format_seen = false;
    let mut header_done = false;
    let mut last_line = 1;
    for (n, line) in lines.by_ref() {
        last_line = n;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                if tokens.get(1) != Some(&"ascii") {
                    return Err(Error::UnsupportedPly(format!("format {}", tokens[1..].join(" "))));
                }
                if tokens.get(2) != Some(&"1.0") {
                    return Err(Error::UnsupportedPly(format!("ascii version {}", tokens[2..].join(" "))));
                }
                format_seen = true;
            }
            Some("element") => {
                if tokens.len() != 3 {
                    return Err(Error::parse(n, "element line needs a name and a count"));
                }
                let count = tokens[2]
                    .parse()
                    .map_err(|_| Error::parse(n, format!("bad element count `{}`", tokens[2])))?;
                elements.push(PlyElement {
                    name: tokens[1].to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(n, "property before any element"))?;
                if tokens.get(1) == Some(&"list") {
                    if el.name == "vertex" {
                        return Err(Error::UnsupportedPly("list property in the vertex element".into()));
                    }
                    el.properties.push(None);
                } else {
                    if tokens.len() != 3 || !PLY_SCALARS.contains(&tokens[1]) {
                        return Err(Error::parse(n, format!("malformed property `{line}`")));
                    }
                    el.properties.push(Some(tokens[2].to_string()));
                }
            }
            Some("end_header") => {
                header_done = true;
                break;
            }
            Some(other) => return Err(Error::parse(n, format!("unexpected header keyword `{other}`"))),
        }
    }
    if !header_done {
        return Err(Error::parse(last_line, "header ends without `end_header`"));
    }
    if !format_seen {
        return Err(Error::parse(last_line, "header lacks a `format` line"));
    }

    let mut coords = Vec::new();
    let mut labels = Vec::new();
    let mut labeled = false;
    let mut found_vertex = false;
    for el in &elements {
        let is_vertex = el.name == "vertex" && !found_vertex;
        let mut slots = [None; 4];
        if is_vertex {
            found_vertex = true;
            for (k, name) in ["x", "y", "z", "label"].iter().enumerate() {
                slots[k] = el.properties.iter().position(|p| p.as_deref() == Some(*name));
            }
            if slots[..3].iter().any(Option::is_none) {
                return Err(Error::UnsupportedPly("vertex element without x, y and z".into()));
            }
            labeled = slots[3].is_some();
            let extra: Vec<&str> = el
                .properties
                .iter()
                .flatten()
                .map(String::as_str)
                .filter(|p| !["x", "y", "z", "label"].contains(p))
                .collect();
            if !extra.is_empty() {
                warn!("skipping vertex properties: {}", extra.join(", "));
            }
        } else {
            warn!("skipping PLY element `{}` ({} rows)", el.name, el.count);
        }
        for row in 0..el.count {
            let (n, line) = lines
                .next()
                .ok_or_else(|| Error::parse(last_line + 1, format!("expected {} `{}` rows, found {row}", el.count, el.name)))?;
            last_line = n;
            if !is_vertex {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.len() != el.properties.len() {
                return Err(Error::parse(
                    n,
                    format!("expected {} fields, found {}", el.properties.len(), tokens.len()),
                ));
            }
            let get = |k: usize| tokens[slots[k].expect("checked")];
            coords.push(Vec3::new(parse_coord(get(0), n)?, parse_coord(get(1), n)?, parse_coord(get(2), n)?));
            if labeled {
                labels.push(parse_label(get(3), n)?);
            }
        }
    }
    if !found_vertex {
        return Err(Error::UnsupportedPly("no vertex element".into()));
    }
    if let Some((n, _)) = lines.find(|(_, l)| !l.is_empty()) {
        return Err(Error::parse(n, "data beyond the declared element counts"));
    }
    build_cloud(coords, labels, labeled)
}

fn push_point(out: &mut String, p: Vec3) {
    let _ = write!(
        out,
        "{} {} {}",
        format_sig(p.x, ROUND_TRIP_DIGITS),
        format_sig(p.y, ROUND_TRIP_DIGITS),
        format_sig(p.z, ROUND_TRIP_DIGITS)
    );
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for (i, &p) in cloud.coords().iter().enumerate() {
        push_point(&mut out, p);
        if let Some(l) = cloud.labels() {
            let _ = write!(out, " {}", l[i]);
        }
        out.push('\n');
    }
    out
}

pub fn format_ply(cloud: &PointCloud) -> String {
    let mut out = String::from("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.labels().is_some() {
        out.push_str("property ushort label\n");
    }
    out.push_str("end_header\n");
    out.push_str(&format_xyz(cloud));
    out
}

/// Writes coordinates (and labels when present); features are not stored.
pub fn write_cloud(cloud: &PointCloud, path: impl AsRef<Path>, format: CloudFormat) -> Result<()> {
    let path = path.as_ref();
    let format = match format {
        CloudFormat::Auto => format_for(path, b""),
        f => f,
    };
    let text = match format {
        CloudFormat::Ply => format_ply(cloud),
        _ => format_xyz(cloud),
    };
    write_text(path, &text)
}

/// CSV with header `f0,f1,...` and one row per point.
pub fn format_features(matrix: &Array2<f64>) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..matrix.ncols()).map(|j| format!("f{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in matrix.outer_iter() {
        let cells: Vec<String> = row.iter().map(|&v| format_sig(v, TABLE_DIGITS)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_features(matrix: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &format_features(matrix))
}

/// Reads a feature CSV written by [`format_features`].
pub fn parse_features(text: &str) -> Result<Array2<f64>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "missing header"))?;
    let cols = if header.is_empty() { 0 } else { header.split(',').count() };
    for (j, name) in header.split(',').enumerate().take(cols) {
        if name != format!("f{j}") {
            return Err(Error::parse(1, format!("unexpected column name `{name}`")));
        }
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols {
            return Err(Error::parse(i + 1, format!("expected {cols} fields, found {}", cells.len())));
        }
        for c in cells {
            values.push(c.parse::<f64>().map_err(|_| Error::parse(i + 1, format!("`{c}` is not a number")))?);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    parse_features(&read_text(path.as_ref())?)
}

/// Per-epoch metrics of several reports in one table. Column count follows
/// the largest class count among them.
pub fn format_train_reports(reports: &[&TrainReport]) -> String {
    let k = reports
        .iter()
        .flat_map(|r| r.epochs.iter().map(|e| e.metrics.per_class_iou.len()))
        .max()
        .unwrap_or(0);
    let mut out = String::from("model,epoch,loss,accuracy,miou");
    for c in 0..k {
        let _ = write!(out, ",iou_{c}");
    }
    out.push('\n');
    for r in reports {
        for e in &r.epochs {
            let _ = write!(
                out,
                "{},{},{},{},{}",
                r.model,
                e.epoch,
                format_sig(e.loss, TABLE_DIGITS),
                format_sig(e.metrics.accuracy, TABLE_DIGITS),
                format_sig(e.metrics.miou, TABLE_DIGITS)
            );
            for c in 0..k {
                match e.metrics.per_class_iou.get(c) {
                    Some(v) => {
                        let _ = write!(out, ",{}", format_sig(*v, TABLE_DIGITS));
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
    }
    out
}

/// One block per line: `name d0xd1 v0 v1 ...` at full precision.
pub fn format_parameters(tensors: &[NamedTensor]) -> String {
    let mut out = String::new();
    for t in tensors {
        let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        let _ = write!(out, "{} {}", t.name, shape.join("x"));
        for &v in &t.values {
            let _ = write!(out, " {}", format_sig(v, ROUND_TRIP_DIGITS));
        }
        out.push('\n');
    }
    out
}

pub fn parse_parameters(text: &str) -> Result<Vec<NamedTensor>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let name = tokens.next().expect("non-empty line");
        let shape_tok = tokens.next().ok_or_else(|| Error::parse(n, "missing shape"))?;
        let shape = shape_tok
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|_| Error::parse(n, format!("bad shape `{shape_tok}`"))))
            .collect::<Result<Vec<usize>>>()?;
        let values = tokens
            .map(|v| v.parse::<f64>().map_err(|_| Error::parse(n, format!("`{v}` is not a number"))))
            .collect::<Result<Vec<f64>>>()?;
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::parse(n, format!("shape {shape_tok} needs {expected} values, found {}", values.len())));
        }
        out.push(NamedTensor::new(name, shape, values));
    }
    Ok(out)
}

pub fn write_parameters(tensors: &[NamedTensor], path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &format_parameters(tensors))
}

pub fn read_parameters(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    parse_parameters(&read_text(path.as_ref())?)
}

/// `step,objective` rows of a fitting trajectory.
pub fn format_trajectory(trajectory: &[f64]) -> String {
    let mut out = String::from("step,objective\n");
    for (i, v) in trajectory.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", format_sig(*v, ROUND_TRIP_DIGITS));
    }
    out
}

pub fn write_string(text: &str, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), text)
}
