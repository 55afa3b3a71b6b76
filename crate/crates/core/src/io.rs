//! ASCII XYZ and binary little-endian PLY point cloud files.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{invalid_data, Error, Result};
use crate::geom::{Point3, PointCloud};

pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let mut p = [0.0; 3];
        for c in &mut p {
            let tok = fields
                .next()
                .ok_or_else(|| Error::InvalidData(format!("line {}: expected 3 coordinates", lineno + 1)))?;
            *c = tok
                .parse::<f64>()
                .map_err(|e| Error::InvalidData(format!("line {}: {e}", lineno + 1)))?;
            if !c.is_finite() {
                return invalid_data(format!("line {}: non-finite coordinate", lineno + 1));
            }
        }
        points.push(p);
    }
    PointCloud::new(points)
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.count() * 48);
    for p in cloud.points() {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    out
}

#[derive(Debug, Clone, Copy)]
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
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
}

/// Reads a binary little-endian PLY. Only the `vertex` element's `x`, `y`,
/// `z` properties are used; other scalar properties and elements that
/// precede or follow it are skipped. List properties are rejected.
pub fn read_ply<R: Read>(reader: R) -> Result<PointCloud> {
    let mut reader = BufReader::new(reader);
    let mut line = String::new();
    let next_line = |reader: &mut BufReader<R>, line: &mut String| -> Result<()> {
        line.clear();
        if reader.read_line(line)? == 0 {
            return invalid_data("unexpected end of PLY header");
        }
        Ok(())
    };

    next_line(&mut reader, &mut line)?;
    if line.trim_end() != "ply" {
        return invalid_data("missing ply magic");
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_ok = false;
    loop {
        next_line(&mut reader, &mut line)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "binary_little_endian", _] => format_ok = true,
            ["format", other, _] => return invalid_data(format!("unsupported PLY format {other}")),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::InvalidData(format!("bad element count {count}")))?,
                props: Vec::new(),
            }),
            ["property", "list", ..] => return invalid_data("list properties are not supported"),
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| Error::InvalidData(format!("unknown PLY type {ty}")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| Error::InvalidData("property before element".into()))?
                    .props
                    .push((name.to_string(), ty));
            }
            ["end_header"] => break,
            _ => return invalid_data(format!("unrecognised PLY header line: {}", line.trim_end())),
        }
    }
    if !format_ok {
        return invalid_data("PLY header has no format line");
    }

    for el in &elements {
        let stride: usize = el.props.iter().map(|(_, t)| t.size()).sum();
        if el.name != "vertex" {
            let mut skip = vec![0u8; stride * el.count];
            reader.read_exact(&mut skip)?;
            continue;
        }
        let offset_of = |axis: &str| -> Result<(usize, Scalar)> {
            let mut off = 0;
            for (name, ty) in &el.props {
                if name == axis {
                    return Ok((off, *ty));
                }
                off += ty.size();
            }
            invalid_data(format!("vertex element lacks property {axis}"))
        };
        let axes = [offset_of("x")?, offset_of("y")?, offset_of("z")?];
        let mut buf = vec![0u8; stride];
        let mut points = Vec::with_capacity(el.count);
        for i in 0..el.count {
            reader.read_exact(&mut buf)?;
            let p: Point3 = std::array::from_fn(|a| axes[a].1.read(&buf[axes[a].0..]));
            if p.iter().any(|c| !c.is_finite()) {
                return invalid_data(format!("non-finite coordinate at vertex {i}"));
            }
            points.push(p);
        }
        return PointCloud::new(points);
    }
    invalid_data("PLY file has no vertex element")
}

/// Writes coordinates as 32-bit floats, the common PLY convention.
pub fn write_ply<W: Write>(mut writer: W, cloud: &PointCloud) -> Result<()> {
    write!(
        writer,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.count()
    )?;
    let mut body = Vec::with_capacity(cloud.count() * 12);
    for p in cloud.points() {
        for c in p {
            body.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    writer.write_all(&body)?;
    Ok(())
}

/// Loads `.xyz` or `.ply` by extension.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ply") => read_ply(fs::File::open(path)?),
        Some("xyz") | Some("txt") => parse_xyz(&fs::read_to_string(path)?),
        _ => invalid_data(format!("unknown point cloud extension: {}", path.display())),
    }
}

pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("xyz") | Some("txt") => fs::write(path, format_xyz(cloud))?,
        _ => {
            let mut bytes = Vec::new();
            write_ply(&mut bytes, cloud)?;
            fs::write(path, bytes)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xyz_parses_and_rejects_nan() {
        let c = parse_xyz("# header\n0 0 0\n1 2.5 -3\n\n").unwrap();
        assert_eq!(c.points(), &[[0.0, 0.0, 0.0], [1.0, 2.5, -3.0]]);
        assert!(parse_xyz("1 2 nan\n").is_err());
        assert!(parse_xyz("1 2 inf\n").is_err());
        assert!(parse_xyz("1 2\n").is_err());
    }

    #[test]
    fn ply_round_trip_at_f32_precision() {
        let c = PointCloud::new(vec![[0.5, -1.25, 3.0], [0.125, 2.0, -0.75]]).unwrap();
        let mut bytes = Vec::new();
        write_ply(&mut bytes, &c).unwrap();
        let back = read_ply(bytes.as_slice()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn ply_skips_extra_properties_and_rejects_nan() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\ncomment x\nelement vertex 1\nproperty uchar red\nproperty double x\nproperty double y\nproperty double z\nend_header\n".to_vec();
        bytes.push(7);
        for v in [1.0f64, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(read_ply(bytes.as_slice()).unwrap().points(), &[[1.0, 2.0, 3.0]]);

        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(read_ply(bytes.as_slice()), Err(Error::InvalidData(_))));
    }

    #[test]
    fn ply_rejects_ascii_format() {
        let bytes = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
        assert!(read_ply(&bytes[..]).is_err());
    }
}
