//! PLY point cloud reader/writer (ASCII and binary little-endian).
//!
//! Vertices need float x,y,z; optional red,green,blue (uchar) seed the first
//! three descriptor channels scaled to [0,1]. Remaining descriptor channels
//! are initialized from N(0, 0.25^2).

use crate::error::{Error, Result};
use crate::scene::PointCloud;
use crate::tensor::scalar::{sc, Scalar};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq)]
enum PlyType {
    F32,
    F64,
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
}

impl PlyType {
    fn parse(s: &str) -> Option<PlyType> {
        Some(match s {
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            "uchar" | "uint8" => PlyType::U8,
            "char" | "int8" => PlyType::I8,
            "ushort" | "uint16" => PlyType::U16,
            "short" | "int16" => PlyType::I16,
            "uint" | "uint32" => PlyType::U32,
            "int" | "int32" => PlyType::I32,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::U8 | PlyType::I8 => 1,
            PlyType::U16 | PlyType::I16 => 2,
            PlyType::F32 | PlyType::U32 | PlyType::I32 => 4,
            PlyType::F64 => 8,
        }
    }

    fn read_le(self, buf: &[u8]) -> f64 {
        match self {
            PlyType::F32 => f32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            PlyType::F64 => f64::from_le_bytes(buf[..8].try_into().unwrap()),
            PlyType::U8 => buf[0] as f64,
            PlyType::I8 => buf[0] as i8 as f64,
            PlyType::U16 => u16::from_le_bytes(buf[..2].try_into().unwrap()) as f64,
            PlyType::I16 => i16::from_le_bytes(buf[..2].try_into().unwrap()) as f64,
            PlyType::U32 => u32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            PlyType::I32 => i32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
        }
    }
}

struct Header {
    binary: bool,
    n_vertices: usize,
    properties: Vec<(PlyType, String)>,
    header_lines: usize,
}

fn parse_header(path: &Path, reader: &mut impl BufRead) -> Result<Header> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        location: format!("header line {line}"),
        message: msg,
    };
    let mut line = String::new();
    let mut lineno = 0usize;
    let read_line = |reader: &mut dyn BufRead, line: &mut String| -> Result<usize> {
        line.clear();
        let n = reader.read_line(line)?;
        Ok(n)
    };
    read_line(reader, &mut line)?;
    lineno += 1;
    if line.trim_end() != "ply" {
        return Err(err(lineno, "missing 'ply' magic".into()));
    }
    let mut binary = None;
    let mut n_vertices = None;
    let mut properties = Vec::new();
    let mut in_vertex_element = false;
    loop {
        if read_line(reader, &mut line)? == 0 {
            return Err(err(lineno, "unexpected end of header".into()));
        }
        lineno += 1;
        let trimmed = line.trim_end();
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        match tokens.first().copied() {
            Some("comment") | Some("obj_info") => continue,
            Some("format") => {
                binary = match tokens.get(1).copied() {
                    Some("ascii") => Some(false),
                    Some("binary_little_endian") => Some(true),
                    other => {
                        return Err(err(
                            lineno,
                            format!("unsupported format {:?}", other.unwrap_or("")),
                        ))
                    }
                };
            }
            Some("element") => {
                let kind = tokens.get(1).copied().unwrap_or("");
                if kind == "vertex" {
                    if n_vertices.is_some() {
                        return Err(err(lineno, "duplicate vertex element".into()));
                    }
                    let n: usize = tokens
                        .get(2)
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| err(lineno, "bad vertex count".into()))?;
                    n_vertices = Some(n);
                    in_vertex_element = true;
                } else {
                    if n_vertices.is_none() {
                        return Err(err(
                            lineno,
                            format!("element '{kind}' precedes vertices; unsupported layout"),
                        ));
                    }
                    in_vertex_element = false;
                }
            }
            Some("property") => {
                if !in_vertex_element {
                    continue; // properties of trailing elements are ignored
                }
                if tokens.get(1).copied() == Some("list") {
                    return Err(err(lineno, "list property on vertices unsupported".into()));
                }
                let ty = tokens
                    .get(1)
                    .and_then(|s| PlyType::parse(s))
                    .ok_or_else(|| {
                        err(lineno, format!("unknown type {:?}", tokens.get(1)))
                    })?;
                let pname = tokens
                    .get(2)
                    .ok_or_else(|| err(lineno, "property missing name".into()))?;
                properties.push((ty, pname.to_string()));
            }
            Some("end_header") => break,
            other => return Err(err(lineno, format!("unexpected token {other:?}"))),
        }
    }
    Ok(Header {
        binary: binary.ok_or_else(|| err(lineno, "missing format line".into()))?,
        n_vertices: n_vertices.ok_or_else(|| err(lineno, "missing vertex element".into()))?,
        properties,
        header_lines: lineno,
    })
}

/// Read a point cloud; descriptors get `n_features` channels, seeded from
/// vertex colors when present and N(0, 0.25^2) otherwise.
pub fn read_ply<S: Scalar>(
    path: &Path,
    n_features: usize,
    rng: &mut impl Rng,
) -> Result<PointCloud<S>> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let header = parse_header(path, &mut reader)?;
    let names: Vec<&str> = header.properties.iter().map(|(_, n)| n.as_str()).collect();
    let find = |want: &str| names.iter().position(|n| *n == want);
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                location: "header".into(),
                message: format!("missing x/y/z float properties; found {names:?}"),
            })
        }
    };
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some((r, g, b)),
        _ => None,
    };

    let n = header.n_vertices;
    let mut positions = Vec::with_capacity(3 * n);
    let mut colors: Vec<f64> = Vec::new();
    if header.binary {
        let stride: usize = header.properties.iter().map(|(t, _)| t.size()).sum();
        let offsets: Vec<usize> = header
            .properties
            .iter()
            .scan(0usize, |acc, (t, _)| {
                let o = *acc;
                *acc += t.size();
                Some(o)
            })
            .collect();
        let mut row = vec![0u8; stride];
        for v in 0..n {
            reader.read_exact(&mut row).map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                location: format!("vertex {v} (byte {})", v * stride),
                message: "truncated vertex data".into(),
            })?;
            for &idx in &[ix, iy, iz] {
                let (ty, _) = header.properties[idx];
                positions.push(sc::<S>(ty.read_le(&row[offsets[idx]..])));
            }
            if let Some((r, g, b)) = rgb {
                for &idx in &[r, g, b] {
                    let (ty, _) = header.properties[idx];
                    colors.push(ty.read_le(&row[offsets[idx]..]));
                }
            }
        }
    } else {
        let mut line = String::new();
        for v in 0..n {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    location: format!("line {}", header.header_lines + v + 1),
                    message: "truncated vertex data".into(),
                });
            }
            let fields: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    location: format!("line {}", header.header_lines + v + 1),
                    message: e.to_string(),
                })?;
            if fields.len() < header.properties.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    location: format!("line {}", header.header_lines + v + 1),
                    message: format!(
                        "expected {} fields, got {}",
                        header.properties.len(),
                        fields.len()
                    ),
                });
            }
            positions.extend([sc::<S>(fields[ix]), sc::<S>(fields[iy]), sc::<S>(fields[iz])]);
            if let Some((r, g, b)) = rgb {
                colors.extend([fields[r], fields[g], fields[b]]);
            }
        }
    }

    let normal = Normal::new(0.0f64, 0.25).expect("valid normal");
    let mut descriptors = Vec::with_capacity(n * n_features);
    for v in 0..n {
        for f in 0..n_features {
            if rgb.is_some() && f < 3 {
                descriptors.push(sc::<S>(colors[3 * v + f] / 255.0));
            } else {
                descriptors.push(sc::<S>(normal.sample(rng)));
            }
        }
    }
    Ok(PointCloud {
        positions,
        log_sizes: vec![S::zero(); n],
        opacity_logits: vec![S::zero(); n], // sigmoid(0) = 0.5
        descriptors,
        n_features,
    })
}

/// Write positions (f32) and, when `n_features >= 3`, colors quantized from
/// the first three descriptor channels.
pub fn write_ply<S: Scalar>(path: &Path, cloud: &PointCloud<S>, binary: bool) -> Result<()> {
    let n = cloud.n_points();
    let with_color = cloud.n_features >= 3;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "ply")?;
    writeln!(
        out,
        "format {} 1.0",
        if binary { "binary_little_endian" } else { "ascii" }
    )?;
    writeln!(out, "element vertex {n}")?;
    writeln!(out, "property float x")?;
    writeln!(out, "property float y")?;
    writeln!(out, "property float z")?;
    if with_color {
        writeln!(out, "property uchar red")?;
        writeln!(out, "property uchar green")?;
        writeln!(out, "property uchar blue")?;
    }
    writeln!(out, "end_header")?;
    let quantize = |v: S| -> u8 { (v.to_f64_s().clamp(0.0, 1.0) * 255.0).round() as u8 };
    for i in 0..n {
        if binary {
            for a in 0..3 {
                let v = cloud.positions[3 * i + a].to_f64_s() as f32;
                out.write_all(&v.to_le_bytes())?;
            }
            if with_color {
                for f in 0..3 {
                    out.write_all(&[quantize(cloud.descriptors[i * cloud.n_features + f])])?;
                }
            }
        } else {
            let p: Vec<String> = (0..3)
                .map(|a| format!("{}", cloud.positions[3 * i + a].to_f64_s() as f32))
                .collect();
            if with_color {
                writeln!(
                    out,
                    "{} {} {} {} {} {}",
                    p[0],
                    p[1],
                    p[2],
                    quantize(cloud.descriptors[i * cloud.n_features]),
                    quantize(cloud.descriptors[i * cloud.n_features + 1]),
                    quantize(cloud.descriptors[i * cloud.n_features + 2]),
                )?;
            } else {
                writeln!(out, "{} {} {}", p[0], p[1], p[2])?;
            }
        }
    }
    Ok(())
}
