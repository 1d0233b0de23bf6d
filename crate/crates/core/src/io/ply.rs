use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use super::PointCloudMap;
use crate::error::{Error, Result};

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

    /// Full-scale value used to normalize integer color/intensity channels.
    fn full_scale(self) -> f64 {
        match self {
            Scalar::U8 | Scalar::I8 => 255.0,
            Scalar::U16 | Scalar::I16 => 65535.0,
            Scalar::U32 | Scalar::I32 => u32::MAX as f64,
            Scalar::F32 | Scalar::F64 => 1.0,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar { ty: Scalar, name: String },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Default)]
struct Channels {
    x: Option<usize>,
    y: Option<usize>,
    z: Option<usize>,
    intensity: Option<usize>,
    rgb: [Option<usize>; 3],
    normal: [Option<usize>; 3],
}

fn perr(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

pub fn load_map(path: &Path) -> Result<PointCloudMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes)
}

/// Parses an ASCII or little-endian binary PLY. Only the `vertex` element is
/// read; elements declared before it must consist of scalar properties.
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloudMap> {
    let (format, elements, body_start) = parse_header(bytes)?;
    let vertex_idx = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| perr(0, "no vertex element"))?;
    let vertex = &elements[vertex_idx];

    let mut ch = Channels::default();
    for (i, p) in vertex.props.iter().enumerate() {
        if let Property::Scalar { name, .. } = p {
            match name.as_str() {
                "x" => ch.x = Some(i),
                "y" => ch.y = Some(i),
                "z" => ch.z = Some(i),
                "intensity" => ch.intensity = Some(i),
                "red" | "r" => ch.rgb[0] = Some(i),
                "green" | "g" => ch.rgb[1] = Some(i),
                "blue" | "b" => ch.rgb[2] = Some(i),
                "nx" => ch.normal[0] = Some(i),
                "ny" => ch.normal[1] = Some(i),
                "nz" => ch.normal[2] = Some(i),
                _ => {}
            }
        }
    }
    let (xi, yi, zi) = match (ch.x, ch.y, ch.z) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(perr(0, "vertex element lacks x/y/z properties")),
    };
    let has_rgb = ch.rgb.iter().all(Option::is_some);
    let has_normals = ch.normal.iter().all(Option::is_some);

    let scales: Vec<f64> = vertex
        .props
        .iter()
        .map(|p| match p {
            Property::Scalar { ty, .. } => ty.full_scale(),
            Property::List { .. } => 1.0,
        })
        .collect();

    let mut records: Vec<(usize, Vec<f64>)> = Vec::with_capacity(vertex.count);
    match format {
        PlyFormat::BinaryLittleEndian => {
            let mut offset = body_start;
            for e in &elements[..vertex_idx] {
                let mut stride = 0;
                for p in &e.props {
                    match p {
                        Property::Scalar { ty, .. } => stride += ty.size(),
                        Property::List { .. } => {
                            return Err(perr(
                                offset,
                                format!("list property in element '{}' before vertex", e.name),
                            ))
                        }
                    }
                }
                offset += stride * e.count;
            }
            for _ in 0..vertex.count {
                let start = offset;
                let mut values = Vec::with_capacity(vertex.props.len());
                for p in &vertex.props {
                    match p {
                        Property::Scalar { ty, .. } => {
                            let end = offset + ty.size();
                            let chunk = bytes
                                .get(offset..end)
                                .ok_or_else(|| perr(offset, "truncated vertex data"))?;
                            values.push(ty.read_le(chunk));
                            offset = end;
                        }
                        Property::List { count, item } => {
                            let chunk = bytes
                                .get(offset..offset + count.size())
                                .ok_or_else(|| perr(offset, "truncated vertex data"))?;
                            let n = count.read_le(chunk) as usize;
                            offset += count.size() + n * item.size();
                            if offset > bytes.len() {
                                return Err(perr(offset, "truncated vertex data"));
                            }
                            values.push(f64::NAN);
                        }
                    }
                }
                records.push((start, values));
            }
        }
        PlyFormat::Ascii => {
            let body = std::str::from_utf8(&bytes[body_start..])
                .map_err(|e| perr(body_start + e.valid_up_to(), "invalid utf-8 in ascii body"))?;
            let mut lines = Vec::new();
            let mut pos = body_start;
            for line in body.split_inclusive('\n') {
                if !line.trim().is_empty() {
                    lines.push((pos, line.trim()));
                }
                pos += line.len();
            }
            let skip: usize = elements[..vertex_idx].iter().map(|e| e.count).sum();
            if lines.len() < skip + vertex.count {
                return Err(perr(bytes.len(), "truncated vertex data"));
            }
            for &(start, line) in &lines[skip..skip + vertex.count] {
                let mut toks = line.split_ascii_whitespace();
                let mut values = Vec::with_capacity(vertex.props.len());
                for p in &vertex.props {
                    let mut next = |what: &str| -> Result<f64> {
                        let tok = toks
                            .next()
                            .ok_or_else(|| perr(start, format!("missing {what} value")))?;
                        tok.parse::<f64>()
                            .map_err(|_| perr(start, format!("cannot parse '{tok}'")))
                    };
                    match p {
                        Property::Scalar { name, .. } => values.push(next(name)?),
                        Property::List { .. } => {
                            let n = next("list count")? as usize;
                            for _ in 0..n {
                                next("list item")?;
                            }
                            values.push(f64::NAN);
                        }
                    }
                }
                records.push((start, values));
            }
        }
    }

    let mut map = PointCloudMap::default();
    map.points.reserve(records.len());
    let mut intensities = Vec::new();
    let mut normals = Vec::new();
    let mut clamped = 0usize;
    for (start, v) in &records {
        let p = Vector3::new(v[xi], v[yi], v[zi]);
        if !p.iter().all(|c| c.is_finite()) {
            return Err(perr(*start, "non-finite vertex coordinate"));
        }
        map.points.push(p);
        let gray = if let Some(i) = ch.intensity {
            Some(v[i] / scales[i])
        } else if has_rgb {
            let c = |k: usize| {
                let i = ch.rgb[k].unwrap();
                v[i] / scales[i]
            };
            Some(0.299 * c(0) + 0.587 * c(1) + 0.114 * c(2))
        } else {
            None
        };
        if let Some(g) = gray {
            if !g.is_finite() {
                return Err(perr(*start, "non-finite intensity"));
            }
            if !(0.0..=1.0).contains(&g) {
                clamped += 1;
            }
            intensities.push(g.clamp(0.0, 1.0));
        }
        if has_normals {
            let n = Vector3::new(
                v[ch.normal[0].unwrap()],
                v[ch.normal[1].unwrap()],
                v[ch.normal[2].unwrap()],
            );
            let len = n.norm();
            if !len.is_finite() || len == 0.0 {
                return Err(perr(*start, "zero or non-finite normal"));
            }
            normals.push(n / len);
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} intensity values outside [0, 1] were clamped");
    }
    if ch.intensity.is_some() || has_rgb {
        map.intensities = Some(intensities);
    }
    if has_normals {
        map.normals = Some(normals);
    }
    Ok(map)
}

fn parse_header(bytes: &[u8]) -> Result<(PlyFormat, Vec<Element>, usize)> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let rel = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| perr(start, "unterminated header"))?;
        *pos = start + rel + 1;
        let line = std::str::from_utf8(&bytes[start..start + rel])
            .map_err(|_| perr(start, "header is not valid utf-8"))?;
        Ok((start, line.trim_end_matches('\r').trim().to_string()))
    };

    let (off, magic) = next_line(&mut pos)?;
    if magic != "ply" {
        return Err(perr(off, "missing 'ply' magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let (off, line) = next_line(&mut pos)?;
        let toks: Vec<&str> = line.split_ascii_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, _version] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(perr(off, format!("unsupported format '{other}'"))),
                })
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| perr(off, format!("bad element count '{count}'")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            ["property", "list", count, item, _name] => {
                let (count, item) = match (Scalar::parse(count), Scalar::parse(item)) {
                    (Some(c), Some(i)) => (c, i),
                    _ => return Err(perr(off, "bad list property types")),
                };
                elements
                    .last_mut()
                    .ok_or_else(|| perr(off, "property before element"))?
                    .props
                    .push(Property::List { count, item });
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty)
                    .ok_or_else(|| perr(off, format!("unknown property type '{ty}'")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| perr(off, "property before element"))?
                    .props
                    .push(Property::Scalar {
                        ty,
                        name: name.to_string(),
                    });
            }
            ["end_header"] => break,
            _ => return Err(perr(off, format!("malformed header line '{line}'"))),
        }
    }
    let format = format.ok_or_else(|| perr(0, "missing format line"))?;
    Ok((format, elements, pos))
}

/// Writes x/y/z (and intensity/normals when present) as doubles.
pub fn write_ply<W: Write>(out: &mut W, map: &PointCloudMap, format: PlyFormat) -> std::io::Result<()> {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(out, "ply\nformat {fmt} 1.0\nelement vertex {}", map.len())?;
    let mut names = vec!["x", "y", "z"];
    if map.intensities.is_some() {
        names.push("intensity");
    }
    if map.normals.is_some() {
        names.extend(["nx", "ny", "nz"]);
    }
    for n in &names {
        writeln!(out, "property double {n}")?;
    }
    writeln!(out, "end_header")?;
    let mut row = Vec::with_capacity(names.len());
    for (i, p) in map.points.iter().enumerate() {
        row.clear();
        row.extend([p.x, p.y, p.z]);
        if let Some(v) = &map.intensities {
            row.push(v[i]);
        }
        if let Some(n) = &map.normals {
            row.extend([n[i].x, n[i].y, n[i].z]);
        }
        match format {
            PlyFormat::Ascii => {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
            PlyFormat::BinaryLittleEndian => {
                for v in &row {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn save_map(path: &Path, map: &PointCloudMap, format: PlyFormat) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_ply(&mut w, map, format).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const THREE: &str = "ply\nformat ascii 1.0\ncomment test\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 1 0.5\n";

    #[test]
    fn ascii_three_vertices() {
        let map = parse_ply(THREE.as_bytes()).unwrap();
        assert_eq!(map.len(), 3);
        assert_eq!(map.points[2], Vector3::new(0.0, 1.0, 0.5));
        assert!(map.intensities.is_none() && map.normals.is_none());
    }

    #[test]
    fn intensity_is_clamped() {
        let src = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty float intensity\nend_header\n0 0 0 1.5\n1 1 1 0.25\n";
        let map = parse_ply(src.as_bytes()).unwrap();
        assert_eq!(map.intensities.unwrap(), vec![1.0, 0.25]);
    }

    #[test]
    fn rgb_is_converted_by_luma() {
        let src = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n0 0 0 255 0 0\n";
        let map = parse_ply(src.as_bytes()).unwrap();
        assert!((map.intensities.unwrap()[0] - 0.299).abs() < 1e-12);
    }

    #[test]
    fn empty_vertex_element_is_accepted() {
        let src = "ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
        assert!(parse_ply(src.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn malformed_and_truncated_inputs_report_offsets() {
        let bad = "ply\nformat ascii 1.0\nelement vertex 1\nproperty wat x\nend_header\n";
        match parse_ply(bad.as_bytes()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, bad.find("property").unwrap()),
            other => panic!("unexpected {other:?}"),
        }
        let mut bin = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n".to_vec();
        let header_len = bin.len();
        bin.extend_from_slice(&[0u8; 16]);
        match parse_ply(&bin) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, header_len + 16),
            other => panic!("unexpected {other:?}"),
        }
        let nan = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\nnan 0 0\n";
        assert!(matches!(parse_ply(nan.as_bytes()), Err(Error::Parse { .. })));
    }

    #[test]
    fn skips_scalar_elements_before_vertex_in_binary() {
        let mut bin = b"ply\nformat binary_little_endian 1.0\nelement meta 1\nproperty int k\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n".to_vec();
        bin.extend_from_slice(&7i32.to_le_bytes());
        for v in [1.0f64, 2.0, 3.0] {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        let map = parse_ply(&bin).unwrap();
        assert_eq!(map.points, vec![Vector3::new(1.0, 2.0, 3.0)]);
    }

    fn arb_map() -> impl Strategy<Value = PointCloudMap> {
        prop::collection::vec(
            (prop::array::uniform3(-1e3f64..1e3), 0.0f64..=1.0, prop::array::uniform3(-1.0f64..1.0)),
            0..40,
        )
        .prop_filter("nonzero normals", |v| {
            v.iter().all(|(_, _, n)| Vector3::from(*n).norm() > 1e-3)
        })
        .prop_map(|v| PointCloudMap {
            points: v.iter().map(|(p, _, _)| Vector3::from(*p)).collect(),
            intensities: Some(v.iter().map(|(_, i, _)| *i).collect()),
            normals: Some(v.iter().map(|(_, _, n)| Vector3::from(*n).normalize()).collect()),
        })
    }

    proptest! {
        #[test]
        fn save_load_round_trip(map in arb_map(), ascii in any::<bool>()) {
            let format = if ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
            let mut buf = Vec::new();
            write_ply(&mut buf, &map, format).unwrap();
            let back = parse_ply(&buf).unwrap();
            prop_assert_eq!(back.len(), map.len());
            for (a, b) in back.points.iter().zip(&map.points) {
                prop_assert!((a - b).amax() <= 1e-12);
            }
            for (a, b) in back.intensities.unwrap().iter().zip(map.intensities.as_ref().unwrap()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            for (a, b) in back.normals.unwrap().iter().zip(map.normals.as_ref().unwrap()) {
                prop_assert!((a - b).amax() <= 1e-12);
            }
        }
    }
}
