use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::PointCloud;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Header {
    format: PlyFormat,
    vertex_count: usize,
    properties: Vec<(String, Scalar)>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut offset = 0usize;
    let mut next_line = |field: &str| -> Result<(usize, String)> {
        let start = offset;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(start as u64, field, "unexpected end of header"))?;
        offset = start + end + 1;
        let line = std::str::from_utf8(&bytes[start..start + end])
            .map_err(|_| Error::parse(start as u64, field, "header is not valid UTF-8"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };

    let (at, magic) = next_line("magic")?;
    if magic != "ply" {
        return Err(Error::parse(at as u64, "magic", format!("expected 'ply', found {magic:?}")));
    }
    let mut format = None;
    let mut vertex_count = None;
    let mut properties = Vec::new();
    let mut in_vertex = false;
    loop {
        let (at, line) = next_line("header")?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", kind, _version] => {
                format = Some(match *kind {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => {
                        return Err(Error::parse(at as u64, "format", format!("unsupported format {other:?}")))
                    }
                });
            }
            ["element", name, count] => {
                if *name != "vertex" {
                    return Err(Error::parse(at as u64, "element", format!("unsupported element {name:?}")));
                }
                in_vertex = true;
                vertex_count = Some(
                    count
                        .parse::<usize>()
                        .map_err(|_| Error::parse(at as u64, "element vertex", format!("bad count {count:?}")))?,
                );
            }
            ["property", "list", ..] => {
                return Err(Error::parse(at as u64, "property", "list properties are not supported"));
            }
            ["property", ty, name] => {
                if !in_vertex {
                    return Err(Error::parse(at as u64, "property", "property before any element"));
                }
                let scalar = Scalar::parse(ty)
                    .ok_or_else(|| Error::parse(at as u64, format!("property {name}"), format!("unknown type {ty:?}")))?;
                properties.push((name.to_string(), scalar));
            }
            _ => return Err(Error::parse(at as u64, "header", format!("unrecognized line {line:?}"))),
        }
    }
    let format = format.ok_or_else(|| Error::parse(0, "format", "missing format line"))?;
    let vertex_count = vertex_count.ok_or_else(|| Error::parse(0, "element vertex", "missing vertex element"))?;
    Ok(Header {
        format,
        vertex_count,
        properties,
        body_offset: offset,
    })
}

/// Parses an ASCII or binary little-endian PLY holding a vertex element with
/// `x`, `y`, `z` and optionally `red`, `green`, `blue`.
pub fn read_ply_from(bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let find = |name: &str| header.properties.iter().position(|(n, _)| n == name);
    let xyz = ["x", "y", "z"].map(find);
    let [Some(ix), Some(iy), Some(iz)] = xyz else {
        return Err(Error::parse(header.body_offset as u64, "property x/y/z", "vertex element lacks x, y or z"));
    };
    let rgb = match ["red", "green", "blue"].map(find) {
        [Some(r), Some(g), Some(b)] => Some([r, g, b]),
        [None, None, None] => None,
        _ => {
            return Err(Error::parse(
                header.body_offset as u64,
                "property red/green/blue",
                "color needs all of red, green and blue",
            ))
        }
    };

    let n = header.vertex_count;
    let mut positions = Vec::with_capacity(n);
    let mut colors = rgb.map(|_| Vec::with_capacity(n));
    let mut values = vec![0.0f64; header.properties.len()];
    let mut push = |values: &[f64]| {
        positions.push(Vector3::new(values[ix], values[iy], values[iz]));
        if let (Some(colors), Some([r, g, b])) = (colors.as_mut(), rgb) {
            colors.push([values[r], values[g], values[b]].map(|c| (c / 255.0) as f32));
        }
    };

    match header.format {
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = header.properties.iter().map(|(_, s)| s.size()).sum();
            let mut at = header.body_offset;
            for v in 0..n {
                for (k, (name, scalar)) in header.properties.iter().enumerate() {
                    let size = scalar.size();
                    if at + size > bytes.len() {
                        return Err(Error::parse(
                            at as u64,
                            format!("vertex {v} property {name}"),
                            format!("truncated body: expected {} bytes", header.body_offset + stride * n),
                        ));
                    }
                    values[k] = scalar.read_le(&bytes[at..at + size]);
                    at += size;
                }
                push(&values);
            }
        }
        PlyFormat::Ascii => {
            let body = &bytes[header.body_offset..];
            let text = std::str::from_utf8(body)
                .map_err(|e| Error::parse((header.body_offset + e.valid_up_to()) as u64, "body", "not valid UTF-8"))?;
            let mut tokens = text
                .split_ascii_whitespace()
                .map(|t| (t.as_ptr() as usize - text.as_ptr() as usize + header.body_offset, t));
            for v in 0..n {
                for (k, (name, _)) in header.properties.iter().enumerate() {
                    let field = || format!("vertex {v} property {name}");
                    let (at, tok) = tokens
                        .next()
                        .ok_or_else(|| Error::parse(bytes.len() as u64, field(), "unexpected end of data"))?;
                    values[k] = tok
                        .parse::<f64>()
                        .map_err(|_| Error::parse(at as u64, field(), format!("bad number {tok:?}")))?;
                }
                push(&values);
            }
        }
    }
    let cloud = PointCloud { positions, colors };
    cloud.validate()?;
    Ok(cloud)
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    read_ply_from(&fs::read(path)?)
}

/// Serializes positions as `float` and colors (if any) as `uchar`.
pub fn write_ply_to<W: Write>(out: &mut W, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    cloud.validate()?;
    let mut header = String::from("ply\n");
    header.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if cloud.colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    header.push_str("end_header\n");
    out.write_all(header.as_bytes())?;

    let to_u8 = |c: f32| (c * 255.0).round().clamp(0.0, 255.0) as u8;
    let mut buf = Vec::with_capacity(cloud.len() * 15);
    for (i, p) in cloud.positions.iter().enumerate() {
        let xyz = [p.x as f32, p.y as f32, p.z as f32];
        let rgb = cloud.colors.as_ref().map(|c| c[i].map(to_u8));
        match format {
            PlyFormat::BinaryLittleEndian => {
                for v in xyz {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(rgb) = rgb {
                    buf.extend_from_slice(&rgb);
                }
            }
            PlyFormat::Ascii => {
                use std::fmt::Write as _;
                let mut line = format!("{:?} {:?} {:?}", xyz[0], xyz[1], xyz[2]);
                if let Some([r, g, b]) = rgb {
                    let _ = write!(line, " {r} {g} {b}");
                }
                line.push('\n');
                buf.extend_from_slice(line.as_bytes());
            }
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn write_ply(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    write_ply_to(&mut file, cloud, format)?;
    file.flush()?;
    Ok(())
}
