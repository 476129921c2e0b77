//! PLY point-cloud reader and writer (ASCII and binary little-endian).
//!
//! Reading accepts any scalar-typed vertex layout with `x`, `y`, `z`
//! properties; colors come from `red`/`green`/`blue` and labels from the
//! first matching property name in the configured search order. Writing
//! emits `double` positions, `uchar` colors and a `uchar` `class` label.

use std::path::Path;

use urbanseg_core::cloud::PointCloud;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyScalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyScalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => PlyScalar::I8,
            "uchar" | "uint8" => PlyScalar::U8,
            "short" | "int16" => PlyScalar::I16,
            "ushort" | "uint16" => PlyScalar::U16,
            "int" | "int32" => PlyScalar::I32,
            "uint" | "uint32" => PlyScalar::U32,
            "float" | "float32" => PlyScalar::F32,
            "double" | "float64" => PlyScalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyScalar::I8 | PlyScalar::U8 => 1,
            PlyScalar::I16 | PlyScalar::U16 => 2,
            PlyScalar::I32 | PlyScalar::U32 | PlyScalar::F32 => 4,
            PlyScalar::F64 => 8,
        }
    }

    fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            PlyScalar::I8 => bytes[0] as i8 as f64,
            PlyScalar::U8 => bytes[0] as f64,
            PlyScalar::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            PlyScalar::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            PlyScalar::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PlyScalar::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PlyScalar::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PlyScalar::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlyProperty {
    pub name: String,
    pub ty: PlyScalar,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlyElement {
    pub name: String,
    pub count: usize,
    pub properties: Vec<PlyProperty>,
    pub has_list: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlyHeader {
    pub format: PlyFormat,
    pub elements: Vec<PlyElement>,
}

impl PlyHeader {
    pub fn vertex_element(&self) -> Option<&PlyElement> {
        self.elements.iter().find(|e| e.name == "vertex")
    }
}

/// Options controlling how optional attributes are located on read.
#[derive(Debug, Clone)]
pub struct PlyReadOptions {
    /// Property names tried, in order, for the label attribute.
    pub label_properties: Vec<String>,
    /// Schema name stamped on the loaded cloud (PLY carries none).
    pub schema_name: String,
}

impl Default for PlyReadOptions {
    fn default() -> Self {
        PlyReadOptions {
            label_properties: vec!["class".into(), "label".into(), "scalar_Label".into()],
            schema_name: "urban5".into(),
        }
    }
}

fn split_line(bytes: &[u8], from: usize) -> Option<(usize, &str)> {
    let rest = &bytes[from..];
    let end = rest.iter().position(|&b| b == b'\n')?;
    let mut line = &rest[..end];
    if line.last() == Some(&b'\r') {
        line = &line[..line.len() - 1];
    }
    let text = core::str::from_utf8(line).ok()?;
    Some((from + end + 1, text))
}

/// Parse the header and return it with the byte offset of the body.
pub fn parse_header(bytes: &[u8]) -> Result<(PlyHeader, usize)> {
    let (mut pos, first) = split_line(bytes, 0)
        .ok_or_else(|| CliError::format("missing header line"))?;
    if first.trim() != "ply" {
        return Err(CliError::format("not a PLY file (missing `ply` magic)"));
    }
    let mut format = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        let (next, line) = split_line(bytes, pos)
            .ok_or_else(|| CliError::format("header not terminated by end_header"))?;
        pos = next;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_ascii_whitespace();
        match tokens.next() {
            Some("end_header") => break,
            Some("comment") | Some("obj_info") => {}
            Some("format") => {
                let kind = tokens.next().unwrap_or("");
                format = Some(match kind {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    "binary_big_endian" => {
                        return Err(CliError::format("binary_big_endian PLY is not supported"))
                    }
                    other => return Err(CliError::format(format!("unknown PLY format `{other}`"))),
                });
            }
            Some("element") => {
                let name = tokens
                    .next()
                    .ok_or_else(|| CliError::format("element without a name"))?;
                let count: usize = tokens
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| CliError::format("element without a count"))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                    has_list: false,
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| CliError::format("property before any element"))?;
                let ty = tokens
                    .next()
                    .ok_or_else(|| CliError::format("property without a type"))?;
                if ty == "list" {
                    element.has_list = true;
                    continue;
                }
                let ty = PlyScalar::parse(ty)
                    .ok_or_else(|| CliError::format(format!("unknown property type `{ty}`")))?;
                let name = tokens
                    .next()
                    .ok_or_else(|| CliError::format("property without a name"))?;
                if element.properties.iter().any(|p| p.name == name) {
                    return Err(CliError::format(format!("duplicate property `{name}`")));
                }
                element.properties.push(PlyProperty {
                    name: name.to_string(),
                    ty,
                });
            }
            Some(other) => {
                return Err(CliError::format(format!("unexpected header line `{other}`")))
            }
            None => {}
        }
    }
    let format = format.ok_or_else(|| CliError::format("header lacks a format line"))?;
    Ok((PlyHeader { format, elements }, pos))
}

fn to_u8(name: &str, v: f64) -> Result<u8> {
    let r = v.round();
    if !v.is_finite() || (v - r).abs() > 1e-6 || !(0.0..=255.0).contains(&r) {
        return Err(CliError::format(format!(
            "property `{name}` value {v} does not fit an 8-bit attribute"
        )));
    }
    Ok(r as u8)
}

/// Read a point cloud from PLY bytes.
pub fn read_ply_bytes(bytes: &[u8], opts: &PlyReadOptions) -> Result<PointCloud> {
    let (header, body_start) = parse_header(bytes)?;
    let vertex = header
        .vertex_element()
        .ok_or_else(|| CliError::format("no vertex element"))?
        .clone();
    if vertex.has_list {
        return Err(CliError::format(
            "vertex elements with list properties are not supported",
        ));
    }
    let prop_index = |name: &str| vertex.properties.iter().position(|p| p.name == name);
    let x = prop_index("x").ok_or_else(|| CliError::format("vertex lacks `x`"))?;
    let y = prop_index("y").ok_or_else(|| CliError::format("vertex lacks `y`"))?;
    let z = prop_index("z").ok_or_else(|| CliError::format("vertex lacks `z`"))?;
    let rgb = match (prop_index("red"), prop_index("green"), prop_index("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let label = opts
        .label_properties
        .iter()
        .find_map(|name| prop_index(name));

    // Raw per-vertex values in property order.
    let mut values = vec![0f64; vertex.count * vertex.properties.len()];
    match header.format {
        PlyFormat::Ascii => {
            let mut pos = body_start;
            // Elements appear in declaration order; skip non-vertex lines.
            for element in &header.elements {
                if element.name == "vertex" {
                    for row in 0..vertex.count {
                        let (next, line) = split_line(bytes, pos).ok_or_else(|| {
                            CliError::format(format!(
                                "truncated body: {row} of {} vertices",
                                vertex.count
                            ))
                        })?;
                        pos = next;
                        let mut tokens = line.split_ascii_whitespace();
                        for (pi, _prop) in vertex.properties.iter().enumerate() {
                            let token = tokens.next().ok_or_else(|| {
                                CliError::format(format!("vertex {row}: missing fields"))
                            })?;
                            values[row * vertex.properties.len() + pi] =
                                token.parse::<f64>().map_err(|_| {
                                    CliError::format(format!(
                                        "vertex {row}: bad number `{token}`"
                                    ))
                                })?;
                        }
                    }
                    break;
                }
                for _ in 0..element.count {
                    let (next, _) = split_line(bytes, pos)
                        .ok_or_else(|| CliError::format("truncated body"))?;
                    pos = next;
                }
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut pos = body_start;
            for element in &header.elements {
                if element.name == "vertex" {
                    let row_size: usize = vertex.properties.iter().map(|p| p.ty.size()).sum();
                    let need = vertex.count * row_size;
                    if bytes.len() < pos + need {
                        return Err(CliError::format(format!(
                            "truncated body: need {need} bytes for {} vertices, have {}",
                            vertex.count,
                            bytes.len() - pos
                        )));
                    }
                    for row in 0..vertex.count {
                        let mut offset = pos + row * row_size;
                        for (pi, prop) in vertex.properties.iter().enumerate() {
                            values[row * vertex.properties.len() + pi] =
                                prop.ty.read_le(&bytes[offset..]);
                            offset += prop.ty.size();
                        }
                    }
                    break;
                }
                if element.has_list {
                    return Err(CliError::format(format!(
                        "cannot skip binary element `{}` with list properties",
                        element.name
                    )));
                }
                let row_size: usize = element.properties.iter().map(|p| p.ty.size()).sum();
                pos += element.count * row_size;
                if bytes.len() < pos {
                    return Err(CliError::format("truncated body before vertex element"));
                }
            }
        }
    }

    let n = vertex.count;
    let stride = vertex.properties.len();
    let mut positions = Vec::with_capacity(n);
    for row in 0..n {
        positions.push([
            values[row * stride + x],
            values[row * stride + y],
            values[row * stride + z],
        ]);
    }
    let mut cloud = PointCloud::new(positions, &opts.schema_name);
    if let Some([r, g, b]) = rgb {
        let mut colors = Vec::with_capacity(n);
        for row in 0..n {
            colors.push([
                to_u8("red", values[row * stride + r])?,
                to_u8("green", values[row * stride + g])?,
                to_u8("blue", values[row * stride + b])?,
            ]);
        }
        cloud.colors = Some(colors);
    }
    if let Some(l) = label {
        let name = &vertex.properties[l].name.clone();
        let mut labels = Vec::with_capacity(n);
        for row in 0..n {
            labels.push(to_u8(name, values[row * stride + l])?);
        }
        cloud.labels = Some(labels);
    }
    Ok(cloud)
}

pub fn read_ply(path: &Path, opts: &PlyReadOptions) -> Result<PointCloud> {
    let bytes = std::fs::read(path)?;
    read_ply_bytes(&bytes, opts)
}

fn check_writable(cloud: &PointCloud) -> Result<()> {
    if let Some(colors) = &cloud.colors {
        if colors.len() != cloud.len() {
            return Err(urbanseg_core::Error::ShapeMismatch(format!(
                "{} colors for {} points",
                colors.len(),
                cloud.len()
            ))
            .into());
        }
    }
    if let Some(labels) = &cloud.labels {
        if labels.len() != cloud.len() {
            return Err(urbanseg_core::Error::ShapeMismatch(format!(
                "{} labels for {} points",
                labels.len(),
                cloud.len()
            ))
            .into());
        }
    }
    for (i, p) in cloud.positions.iter().enumerate() {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(urbanseg_core::Error::NonFiniteCoordinate { index: i }.into());
        }
    }
    Ok(())
}

/// Serialize a cloud to PLY. Positions are written as `double`, colors and
/// labels as `uchar`; ASCII floats use the shortest round-trip decimal form,
/// so both formats parse back to bit-identical coordinates.
pub fn write_ply_bytes(cloud: &PointCloud, format: PlyFormat) -> Result<Vec<u8>> {
    check_writable(cloud)?;
    let mut out = Vec::new();
    out.extend_from_slice(b"ply\n");
    out.extend_from_slice(match format {
        PlyFormat::Ascii => b"format ascii 1.0\n".as_slice(),
        PlyFormat::BinaryLittleEndian => b"format binary_little_endian 1.0\n".as_slice(),
    });
    out.extend_from_slice(format!("element vertex {}\n", cloud.len()).as_bytes());
    out.extend_from_slice(b"property double x\nproperty double y\nproperty double z\n");
    if cloud.colors.is_some() {
        out.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if cloud.labels.is_some() {
        out.extend_from_slice(b"property uchar class\n");
    }
    out.extend_from_slice(b"end_header\n");
    match format {
        PlyFormat::Ascii => {
            let mut line = String::new();
            for i in 0..cloud.len() {
                line.clear();
                let p = cloud.positions[i];
                line.push_str(&format!("{} {} {}", p[0], p[1], p[2]));
                if let Some(colors) = &cloud.colors {
                    let c = colors[i];
                    line.push_str(&format!(" {} {} {}", c[0], c[1], c[2]));
                }
                if let Some(labels) = &cloud.labels {
                    line.push_str(&format!(" {}", labels[i]));
                }
                line.push('\n');
                out.extend_from_slice(line.as_bytes());
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for i in 0..cloud.len() {
                for c in cloud.positions[i] {
                    out.extend_from_slice(&c.to_le_bytes());
                }
                if let Some(colors) = &cloud.colors {
                    out.extend_from_slice(&colors[i]);
                }
                if let Some(labels) = &cloud.labels {
                    out.push(labels[i]);
                }
            }
        }
    }
    Ok(out)
}

pub fn write_ply(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    let bytes = write_ply_bytes(cloud, format)?;
    std::fs::write(path, bytes)?;
    Ok(())
}
