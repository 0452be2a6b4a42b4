//! ASCII PLY point clouds: `x y z [label] [f0 .. f{d-1}]`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{FeatureTable, Point3, PointCloud};

/// Formats `v` with nine significant digits in positional notation.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{:.8}", if v == 0.0 { 0.0 } else { v });
    }
    let exponent = v.abs().log10().floor() as i32;
    let mut decimals = (8 - exponent).max(0) as usize;
    let mut s = format!("{v:.decimals$}");
    // log10 can land one off near powers of ten; fix the digit count after rounding.
    let digits = s.bytes().filter(u8::is_ascii_digit).count();
    let leading_zeros = leading_zero_digits(&s);
    let significant = digits - leading_zeros;
    if significant > 9 && decimals > 0 {
        decimals -= 1;
        s = format!("{v:.decimals$}");
    } else if significant < 9 {
        decimals += 9 - significant;
        s = format!("{v:.decimals$}");
    }
    s
}

fn leading_zero_digits(s: &str) -> usize {
    s.bytes()
        .filter(|b| b.is_ascii_digit() || *b == b'.')
        .take_while(|b| *b == b'0' || *b == b'.')
        .filter(|b| *b == b'0')
        .count()
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Column {
    X,
    Y,
    Z,
    Label,
    Feature(usize),
}

pub fn write_point_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_point_cloud(cloud)).map_err(|e| Error::io(path, e))
}

pub fn encode_point_cloud(cloud: &PointCloud) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.labels().is_some() {
        out.push_str("property int label\n");
    }
    let dim = cloud.features().map_or(0, FeatureTable::dim);
    for k in 0..dim {
        let _ = writeln!(out, "property double f{k}");
    }
    out.push_str("end_header\n");
    for (i, p) in cloud.points().iter().enumerate() {
        let _ = write!(
            out,
            "{} {} {}",
            format_sig9(p.x),
            format_sig9(p.y),
            format_sig9(p.z)
        );
        if let Some(labels) = cloud.labels() {
            let _ = write!(out, " {}", labels[i]);
        }
        if let Some(features) = cloud.features() {
            for v in features.row(i) {
                let _ = write!(out, " {}", format_sig9(*v));
            }
        }
        out.push('\n');
    }
    out
}

pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_point_cloud(&text, &path.display().to_string())
}

/// Parses PLY text; `origin` names the source in error messages.
pub fn decode_point_cloud(text: &str, origin: &str) -> Result<PointCloud> {
    let err = |line: usize, msg: String| Error::parse(origin, line, msg);
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    match lines.next() {
        Some((_, "ply")) => {}
        other => return Err(err(other.map_or(1, |(n, _)| n), "missing 'ply' magic".into())),
    }

    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut columns: Vec<Column> = Vec::new();
    let mut header_end = None;
    for (n, line) in lines.by_ref() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => continue,
            ["format", "ascii", "1.0"] => {}
            ["format", other, ..] => {
                return Err(err(n, format!("unsupported format '{other}' (ASCII only)")))
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| err(n, format!("bad element count '{count}'")))?;
                if *name == "vertex" {
                    if vertex_count.is_some() {
                        return Err(err(n, "duplicate vertex element".into()));
                    }
                    vertex_count = Some(count);
                    in_vertex = true;
                } else if count == 0 {
                    in_vertex = false;
                } else {
                    return Err(err(n, format!("unsupported element '{name}'")));
                }
            }
            ["property", "list", ..] => {
                return Err(err(n, "list properties are not supported".into()))
            }
            ["property", ty, name] => {
                if !in_vertex {
                    continue;
                }
                if !is_scalar_type(ty) {
                    return Err(err(n, format!("unknown property type '{ty}'")));
                }
                let column = match *name {
                    "x" => Column::X,
                    "y" => Column::Y,
                    "z" => Column::Z,
                    "label" => Column::Label,
                    other => match other.strip_prefix('f').and_then(|s| s.parse().ok()) {
                        Some(k) => Column::Feature(k),
                        None => return Err(err(n, format!("unsupported property '{other}'"))),
                    },
                };
                if columns.contains(&column) {
                    return Err(err(n, format!("duplicate property '{name}'")));
                }
                columns.push(column);
            }
            ["end_header"] => {
                header_end = Some(n);
                break;
            }
            _ => return Err(err(n, format!("malformed header line '{line}'"))),
        }
    }
    let header_end = header_end.ok_or_else(|| err(text.lines().count(), "missing end_header".into()))?;
    let vertex_count =
        vertex_count.ok_or_else(|| err(header_end, "missing 'element vertex'".into()))?;
    for (axis, col) in [("x", Column::X), ("y", Column::Y), ("z", Column::Z)] {
        if !columns.contains(&col) {
            return Err(err(header_end, format!("missing property '{axis}'")));
        }
    }
    let feature_dim = columns
        .iter()
        .filter(|c| matches!(c, Column::Feature(_)))
        .count();
    for k in 0..feature_dim {
        if !columns.contains(&Column::Feature(k)) {
            return Err(err(header_end, format!("feature properties skip f{k}")));
        }
    }
    let has_labels = columns.contains(&Column::Label);

    let mut points = Vec::with_capacity(vertex_count);
    let mut labels = has_labels.then(|| Vec::with_capacity(vertex_count));
    let mut features = (feature_dim > 0).then(|| vec![0.0; vertex_count * feature_dim]);
    let mut last_line = header_end;
    for (n, line) in lines {
        last_line = n;
        if line.is_empty() {
            continue;
        }
        if points.len() == vertex_count {
            return Err(err(
                n,
                format!("vertex count mismatch: more than {vertex_count} vertices"),
            ));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != columns.len() {
            return Err(err(
                n,
                format!("expected {} values, found {}", columns.len(), tokens.len()),
            ));
        }
        let row = points.len();
        let mut xyz = [0.0; 3];
        for (col, tok) in columns.iter().zip(&tokens) {
            if *col == Column::Label {
                let label: u32 = tok
                    .parse()
                    .map_err(|_| err(n, format!("invalid label '{tok}'")))?;
                labels.as_mut().expect("label column present").push(label);
                continue;
            }
            let v: f64 = tok
                .parse()
                .map_err(|_| err(n, format!("invalid number '{tok}'")))?;
            if !v.is_finite() {
                return Err(err(n, format!("non-finite value '{tok}'")));
            }
            match col {
                Column::X => xyz[0] = v,
                Column::Y => xyz[1] = v,
                Column::Z => xyz[2] = v,
                Column::Feature(k) => {
                    features.as_mut().expect("feature columns present")[row * feature_dim + k] = v
                }
                Column::Label => unreachable!(),
            }
        }
        points.push(Point3::new(xyz[0], xyz[1], xyz[2]));
    }
    if points.len() != vertex_count {
        return Err(err(
            last_line,
            format!(
                "vertex count mismatch: header declares {vertex_count}, found {}",
                points.len()
            ),
        ));
    }
    let features = features
        .map(|values| FeatureTable::new(feature_dim, values))
        .transpose()?;
    PointCloud::new(points, labels, features)
}

fn is_scalar_type(ty: &str) -> bool {
    matches!(
        ty,
        "char"
            | "uchar"
            | "short"
            | "ushort"
            | "int"
            | "uint"
            | "float"
            | "double"
            | "int8"
            | "uint8"
            | "int16"
            | "uint16"
            | "int32"
            | "uint32"
            | "float32"
            | "float64"
    )
}
