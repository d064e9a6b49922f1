//! Binary little-endian PLY in the layout used by 3DGS checkpoints.
//!
//! Vertex properties: `x y z nx ny nz f_dc_0..2 f_rest_* opacity
//! scale_0..2 rot_0..3`, all `float`. `f_rest` is channel-major: entry
//! `c * (K - 1) + (l - 1)` holds SH row `l`, channel `c`, with K the number
//! of rows. Normals are optional on input and always written.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use super::{sh, Gaussian, GaussianScene};

#[derive(Debug, thiserror::Error)]
pub enum PlyError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header at byte {offset}: {msg}")]
    Header { offset: usize, msg: String },
    #[error("missing vertex property \"{property}\" (header ends at byte {offset})")]
    MissingProperty { property: String, offset: usize },
    #[error("property \"{property}\" has type {ty}, expected float (byte {offset})")]
    WrongType {
        property: String,
        ty: String,
        offset: usize,
    },
    #[error("{count} f_rest properties do not match any SH degree 0..=3 (byte {offset})")]
    Degree { count: usize, offset: usize },
    #[error("vertex data truncated while reading \"{property}\" at byte {offset}")]
    Truncated { property: String, offset: usize },
}

struct Property {
    name: String,
    ty: String,
    /// Byte offset of the declaring header line.
    header_offset: usize,
}

fn type_size(ty: &str) -> Option<usize> {
    Some(match ty {
        "char" | "uchar" | "int8" | "uint8" => 1,
        "short" | "ushort" | "int16" | "uint16" => 2,
        "int" | "uint" | "float" | "int32" | "uint32" | "float32" => 4,
        "double" | "float64" => 8,
        _ => return None,
    })
}

struct Header {
    vertex_count: usize,
    properties: Vec<Property>,
    len: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, PlyError> {
    let mut offset = 0;
    let mut lines = Vec::new();
    loop {
        let Some(nl) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Err(PlyError::Header {
                offset,
                msg: "no end_header line".into(),
            });
        };
        let line = std::str::from_utf8(&bytes[offset..offset + nl])
            .map_err(|_| PlyError::Header {
                offset,
                msg: "header is not UTF-8".into(),
            })?
            .trim_end_matches('\r')
            .to_string();
        lines.push((offset, line.clone()));
        offset += nl + 1;
        if line == "end_header" {
            break;
        }
    }
    let header_len = offset;
    let mut it = lines.into_iter();
    match it.next() {
        Some((_, l)) if l == "ply" => {}
        _ => {
            return Err(PlyError::Header {
                offset: 0,
                msg: "missing \"ply\" magic".into(),
            })
        }
    }
    let mut vertex_count = None;
    let mut properties = Vec::new();
    let mut in_vertex = false;
    for (off, line) in it {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => {
                return Err(PlyError::Header {
                    offset: off,
                    msg: format!("unsupported format {other}"),
                })
            }
            ["comment", ..] | ["obj_info", ..] | ["end_header"] => {}
            ["element", "vertex", n] => {
                let n = n.parse().map_err(|_| PlyError::Header {
                    offset: off,
                    msg: format!("bad vertex count {n}"),
                })?;
                vertex_count = Some(n);
                in_vertex = true;
            }
            ["element", name, _] => {
                return Err(PlyError::Header {
                    offset: off,
                    msg: format!("unsupported element {name}"),
                })
            }
            ["property", "list", ..] => {
                return Err(PlyError::Header {
                    offset: off,
                    msg: "list properties are not supported".into(),
                })
            }
            ["property", ty, name] if in_vertex => {
                if type_size(ty).is_none() {
                    return Err(PlyError::Header {
                        offset: off,
                        msg: format!("unknown type {ty}"),
                    });
                }
                properties.push(Property {
                    name: name.to_string(),
                    ty: ty.to_string(),
                    header_offset: off,
                });
            }
            _ => {
                return Err(PlyError::Header {
                    offset: off,
                    msg: format!("unexpected line {line:?}"),
                })
            }
        }
    }
    let vertex_count = vertex_count.ok_or(PlyError::Header {
        offset: header_len,
        msg: "no vertex element".into(),
    })?;
    Ok(Header {
        vertex_count,
        properties,
        len: header_len,
    })
}

/// Parses a PLY byte buffer into a scene.
pub fn read_ply(bytes: &[u8]) -> Result<GaussianScene, PlyError> {
    let header = parse_header(bytes)?;
    let mut offsets: HashMap<&str, (usize, &Property)> = HashMap::new();
    let mut stride = 0;
    for p in &header.properties {
        offsets.insert(p.name.as_str(), (stride, p));
        stride += type_size(&p.ty).expect("validated");
    }
    let lookup = |name: &str| -> Result<usize, PlyError> {
        let (off, p) = offsets.get(name).ok_or_else(|| PlyError::MissingProperty {
            property: name.to_string(),
            offset: header.len,
        })?;
        if p.ty != "float" && p.ty != "float32" {
            return Err(PlyError::WrongType {
                property: name.to_string(),
                ty: p.ty.clone(),
                offset: p.header_offset,
            });
        }
        Ok(*off)
    };

    let rest_count = header
        .properties
        .iter()
        .filter(|p| p.name.starts_with("f_rest_"))
        .count();
    if rest_count % 3 != 0 || sh::degree_for_count(rest_count / 3 + 1).is_none() {
        return Err(PlyError::Degree {
            count: rest_count,
            offset: header.len,
        });
    }
    let rows = rest_count / 3 + 1;
    let degree = sh::degree_for_count(rows).expect("checked");

    let names3 = |prefix: &str| -> Vec<String> { (0..3).map(|i| format!("{prefix}{i}")).collect() };
    let pos = [lookup("x")?, lookup("y")?, lookup("z")?];
    let normal: Option<Vec<usize>> = ["nx", "ny", "nz"]
        .iter()
        .map(|n| lookup(n).ok())
        .collect();
    let dc: Vec<usize> = names3("f_dc_").iter().map(|n| lookup(n)).collect::<Result<_, _>>()?;
    let rest: Vec<usize> = (0..rest_count)
        .map(|i| lookup(&format!("f_rest_{i}")))
        .collect::<Result<_, _>>()?;
    let opacity = lookup("opacity")?;
    let scale: Vec<usize> = names3("scale_").iter().map(|n| lookup(n)).collect::<Result<_, _>>()?;
    let rot: Vec<usize> = (0..4)
        .map(|i| lookup(&format!("rot_{i}")))
        .collect::<Result<_, _>>()?;

    let body = &bytes[header.len..];
    let needed = header.vertex_count * stride;
    if body.len() < needed {
        let vertex = body.len() / stride.max(1);
        let within = body.len() - vertex * stride;
        let property = header
            .properties
            .iter()
            .scan(0, |acc, p| {
                let start = *acc;
                *acc += type_size(&p.ty).unwrap();
                Some((start, p))
            })
            .find(|(start, p)| within < start + type_size(&p.ty).unwrap())
            .map(|(_, p)| p.name.clone())
            .unwrap_or_default();
        return Err(PlyError::Truncated {
            property,
            offset: header.len + body.len(),
        });
    }

    let gaussians = (0..header.vertex_count)
        .map(|v| {
            let rec = &body[v * stride..(v + 1) * stride];
            let f = |off: usize| f32::from_le_bytes(rec[off..off + 4].try_into().unwrap());
            let mut sh = vec![[0.0f32; 3]; rows];
            sh[0] = [f(dc[0]), f(dc[1]), f(dc[2])];
            for c in 0..3 {
                for l in 1..rows {
                    sh[l][c] = f(rest[c * (rows - 1) + (l - 1)]);
                }
            }
            Gaussian {
                position: [f(pos[0]), f(pos[1]), f(pos[2])],
                normal: normal
                    .as_ref()
                    .map(|n| [f(n[0]), f(n[1]), f(n[2])])
                    .unwrap_or([0.0; 3]),
                raw_scale: [f(scale[0]), f(scale[1]), f(scale[2])],
                rotation: [f(rot[0]), f(rot[1]), f(rot[2]), f(rot[3])],
                raw_opacity: f(opacity),
                sh,
            }
        })
        .collect();
    Ok(GaussianScene::new(gaussians, degree).expect("rows consistent by construction"))
}

/// Property names in file order for a given SH degree.
pub fn property_names(degree: usize) -> Vec<String> {
    let rest = 3 * (sh::coeff_count(degree) - 1);
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..rest).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

pub fn write_ply(scene: &GaussianScene) -> Vec<u8> {
    let rows = sh::coeff_count(scene.sh_degree());
    let names = property_names(scene.sh_degree());
    let mut out = Vec::new();
    writeln!(out, "ply").unwrap();
    writeln!(out, "format binary_little_endian 1.0").unwrap();
    writeln!(out, "element vertex {}", scene.len()).unwrap();
    for n in &names {
        writeln!(out, "property float {n}").unwrap();
    }
    writeln!(out, "end_header").unwrap();
    out.reserve(scene.len() * names.len() * 4);
    for g in &scene.gaussians {
        let mut put = |v: f32| out.extend_from_slice(&v.to_le_bytes());
        g.position.iter().chain(&g.normal).for_each(|&v| put(v));
        g.sh[0].iter().for_each(|&v| put(v));
        for c in 0..3 {
            for row in &g.sh[1..rows] {
                put(row[c]);
            }
        }
        put(g.raw_opacity);
        g.raw_scale.iter().chain(&g.rotation).for_each(|&v| put(v));
    }
    out
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<GaussianScene, PlyError> {
    read_ply(&std::fs::read(path)?)
}

pub fn save_ply(scene: &GaussianScene, path: impl AsRef<Path>) -> Result<(), PlyError> {
    std::fs::write(path, write_ply(scene))?;
    Ok(())
}
