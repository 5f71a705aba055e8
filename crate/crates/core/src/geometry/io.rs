//! OBJ and PLY triangle mesh reading, OBJ writing.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{compute_vertex_normals, validate_faces, Mesh, Vec3};
use crate::error::{Error, Result};

/// Loads an OBJ (ASCII) or PLY (ASCII or binary little-endian) triangle mesh.
///
/// The format is chosen by extension, falling back to sniffing the `ply`
/// magic. File normals are used when there is one per vertex; otherwise
/// area-weighted normals are computed.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let is_ply = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("ply"))
        .unwrap_or(false)
        || bytes.starts_with(b"ply");
    let raw = if is_ply {
        parse_ply(&bytes, &name)?
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::format(&name, "OBJ file is not valid UTF-8"))?;
        parse_obj(text, &name)?
    };
    raw.into_mesh()
}

struct RawMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    normals: Vec<Vec3>,
    colors: Vec<Vec3>,
}

impl RawMesh {
    fn into_mesh(self) -> Result<Mesh> {
        validate_faces(&self.faces, self.vertices.len())?;
        let n = self.vertices.len();
        let file_normals_ok = self.normals.len() == n
            && self
                .normals
                .iter()
                .all(|v| v.norm().is_finite() && v.norm() > 1e-12);
        let vertex_normals = if file_normals_ok {
            self.normals.iter().map(|v| v.normalize()).collect()
        } else {
            compute_vertex_normals(&self.vertices, &self.faces)
        };
        Ok(Mesh {
            colors: (self.colors.len() == n && n > 0).then_some(self.colors),
            vertices: self.vertices,
            faces: self.faces,
            vertex_normals,
            features: None,
        })
    }
}

fn parse_obj(text: &str, name: &str) -> Result<RawMesh> {
    let mut raw = RawMesh {
        vertices: Vec::new(),
        faces: Vec::new(),
        normals: Vec::new(),
        colors: Vec::new(),
    };
    let mut colored_vertices = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        let Some(tag) = tokens.next() else { continue };
        let ctx = || format!("{name}:{}", lineno + 1);
        match tag {
            "v" => {
                let values = tokens
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::format(ctx(), e.to_string()))?;
                if values.len() < 3 {
                    return Err(Error::format(ctx(), "vertex needs three coordinates"));
                }
                raw.vertices
                    .push(Vec3::new(values[0], values[1], values[2]));
                if values.len() >= 6 {
                    raw.colors.push(Vec3::new(values[3], values[4], values[5]));
                    colored_vertices += 1;
                }
            }
            "vn" => {
                let values = tokens
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::format(ctx(), e.to_string()))?;
                if values.len() != 3 {
                    return Err(Error::format(ctx(), "normal needs three components"));
                }
                raw.normals.push(Vec3::new(values[0], values[1], values[2]));
            }
            "f" => {
                let corners: Vec<&str> = tokens.collect();
                if corners.len() != 3 {
                    return Err(Error::NonTriangleFace {
                        path: name.to_string(),
                        line: lineno + 1,
                        count: corners.len(),
                    });
                }
                let mut face = [0usize; 3];
                for (slot, corner) in face.iter_mut().zip(&corners) {
                    let first = corner.split('/').next().unwrap_or("");
                    let index: i64 = first
                        .parse()
                        .map_err(|_| Error::format(ctx(), format!("bad face index {first:?}")))?;
                    *slot = match index {
                        i if i > 0 => (i - 1) as usize,
                        i if i < 0 => {
                            let resolved = raw.vertices.len() as i64 + i;
                            if resolved < 0 {
                                return Err(Error::format(
                                    ctx(),
                                    format!("relative index {i} before first vertex"),
                                ));
                            }
                            resolved as usize
                        }
                        _ => return Err(Error::format(ctx(), "face index 0 (OBJ is 1-based)")),
                    };
                }
                raw.faces.push(face);
            }
            _ => {}
        }
    }
    if colored_vertices != raw.vertices.len() {
        raw.colors.clear();
    }
    Ok(raw)
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
    fn parse(name: &str) -> Option<Scalar> {
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
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

/// Streams PLY values one at a time, from either encoding.
enum PlyCursor<'a> {
    Ascii(std::str::SplitAsciiWhitespace<'a>),
    Binary { data: &'a [u8], pos: usize },
}

impl PlyCursor<'_> {
    fn next(&mut self, ty: Scalar, ctx: &str) -> Result<f64> {
        match self {
            PlyCursor::Ascii(tokens) => {
                let tok = tokens.next().ok_or_else(|| Error::Truncated {
                    context: ctx.to_string(),
                    expected: 1,
                })?;
                tok.parse::<f64>()
                    .map_err(|e| Error::format(ctx, format!("{tok:?}: {e}")))
            }
            PlyCursor::Binary { data, pos } => {
                let size = ty.size();
                if *pos + size > data.len() {
                    return Err(Error::Truncated {
                        context: ctx.to_string(),
                        expected: *pos + size - data.len(),
                    });
                }
                let v = ty.read_le(&data[*pos..*pos + size]);
                *pos += size;
                Ok(v)
            }
        }
    }
}

fn parse_ply(bytes: &[u8], name: &str) -> Result<RawMesh> {
    const END: &[u8] = b"end_header";
    let header_end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::format(name, "PLY header has no end_header"))?;
    let mut body_start = header_end + END.len();
    while body_start < bytes.len() && bytes[body_start] != b'\n' {
        body_start += 1;
    }
    body_start += 1;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::format(name, "PLY header is not ASCII"))?;

    let mut ascii = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in header.lines() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["ply"] | [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => ascii = Some(true),
            ["format", "binary_little_endian", _] => ascii = Some(false),
            ["format", other, _] => {
                return Err(Error::format(
                    name,
                    format!("unsupported PLY format {other}"),
                ))
            }
            ["element", elem, count] => elements.push(Element {
                name: elem.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::format(name, format!("bad element count {count}")))?,
                properties: Vec::new(),
            }),
            ["property", "list", count_ty, item_ty, prop] => {
                let (Some(c), Some(i)) = (Scalar::parse(count_ty), Scalar::parse(item_ty)) else {
                    return Err(Error::format(
                        name,
                        format!("bad list property types in {line:?}"),
                    ));
                };
                let elem = elements
                    .last_mut()
                    .ok_or_else(|| Error::format(name, "property before element"))?;
                elem.properties.push(Property::List(prop.to_string(), c, i));
            }
            ["property", ty, prop] => {
                let ty = Scalar::parse(ty)
                    .ok_or_else(|| Error::format(name, format!("unknown PLY type {ty}")))?;
                let elem = elements
                    .last_mut()
                    .ok_or_else(|| Error::format(name, "property before element"))?;
                elem.properties.push(Property::Scalar(prop.to_string(), ty));
            }
            _ => {
                return Err(Error::format(
                    name,
                    format!("unrecognized header line {line:?}"),
                ))
            }
        }
    }
    let ascii = ascii.ok_or_else(|| Error::format(name, "PLY header has no format line"))?;
    let body = &bytes[body_start.min(bytes.len())..];
    let mut cursor = if ascii {
        let text = std::str::from_utf8(body)
            .map_err(|_| Error::format(name, "ASCII PLY body is not UTF-8"))?;
        PlyCursor::Ascii(text.split_ascii_whitespace())
    } else {
        PlyCursor::Binary { data: body, pos: 0 }
    };

    let mut raw = RawMesh {
        vertices: Vec::new(),
        faces: Vec::new(),
        normals: Vec::new(),
        colors: Vec::new(),
    };
    for elem in &elements {
        let ctx = format!("{name} element {}", elem.name);
        for _ in 0..elem.count {
            let mut pos = [0.0; 3];
            let mut nrm = [f64::NAN; 3];
            let mut rgb = [f64::NAN; 3];
            for prop in &elem.properties {
                match prop {
                    Property::Scalar(pname, ty) => {
                        let v = cursor.next(*ty, &ctx)?;
                        let scale = if matches!(ty, Scalar::U8) {
                            1.0 / 255.0
                        } else {
                            1.0
                        };
                        match pname.as_str() {
                            "x" => pos[0] = v,
                            "y" => pos[1] = v,
                            "z" => pos[2] = v,
                            "nx" => nrm[0] = v,
                            "ny" => nrm[1] = v,
                            "nz" => nrm[2] = v,
                            "red" => rgb[0] = v * scale,
                            "green" => rgb[1] = v * scale,
                            "blue" => rgb[2] = v * scale,
                            _ => {}
                        }
                    }
                    Property::List(pname, count_ty, item_ty) => {
                        let count = cursor.next(*count_ty, &ctx)? as usize;
                        let mut items = Vec::with_capacity(count);
                        for _ in 0..count {
                            items.push(cursor.next(*item_ty, &ctx)?);
                        }
                        let is_face_list = elem.name == "face"
                            && (pname == "vertex_indices" || pname == "vertex_index");
                        if is_face_list {
                            if count != 3 {
                                return Err(Error::NonTriangleFace {
                                    path: name.to_string(),
                                    line: raw.faces.len() + 1,
                                    count,
                                });
                            }
                            let mut face = [0usize; 3];
                            for (slot, &v) in face.iter_mut().zip(&items) {
                                if v < 0.0 {
                                    return Err(Error::format(&ctx, "negative vertex index"));
                                }
                                *slot = v as usize;
                            }
                            raw.faces.push(face);
                        }
                    }
                }
            }
            if elem.name == "vertex" {
                raw.vertices.push(Vec3::from(pos));
                if nrm.iter().all(|v| v.is_finite()) {
                    raw.normals.push(Vec3::from(nrm));
                }
                if rgb.iter().all(|v| v.is_finite()) {
                    raw.colors.push(Vec3::from(rgb));
                }
            }
        }
    }
    Ok(raw)
}

/// Writes an ASCII OBJ with `v` (plus colors when present), `vn` and `f`
/// records. Coordinates use shortest round-trip formatting.
pub fn save_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_obj(mesh, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_obj(mesh: &Mesh, w: &mut impl Write) -> std::io::Result<()> {
    for (i, v) in mesh.vertices.iter().enumerate() {
        match &mesh.colors {
            Some(c) => writeln!(
                w,
                "v {} {} {} {} {} {}",
                v.x, v.y, v.z, c[i].x, c[i].y, c[i].z
            )?,
            None => writeln!(w, "v {} {} {}", v.x, v.y, v.z)?,
        }
    }
    for n in &mesh.vertex_normals {
        writeln!(w, "vn {} {} {}", n.x, n.y, n.z)?;
    }
    for &[a, b, c] in &mesh.faces {
        writeln!(w, "f {0}//{0} {1}//{1} {2}//{2}", a + 1, b + 1, c + 1)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes;

    fn write(dir: &tempfile::TempDir, name: &str, content: &[u8]) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, content).unwrap();
        p
    }

    #[test]
    fn obj_single_triangle() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "t.obj", b"v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n");
        let m = load_mesh(&p).unwrap();
        assert_eq!(m.vertex_count(), 3);
        assert_eq!(m.face_count(), 1);
        for n in &m.vertex_normals {
            assert!((n - Vec3::z()).norm() < 1e-12);
        }
    }

    #[test]
    fn obj_slash_and_negative_indices() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "t.obj",
            b"# comment\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf -3/1 -2/1 -1/1\n",
        );
        let m = load_mesh(&p).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn obj_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_mesh(dir.path().join("nope.obj")),
            Err(Error::MissingFile(_))
        ));
        let quad = write(
            &dir,
            "q.obj",
            b"v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n",
        );
        assert!(matches!(
            load_mesh(quad),
            Err(Error::NonTriangleFace {
                count: 4,
                line: 5,
                ..
            })
        ));
        let oob = write(&dir, "o.obj", b"v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 99\n");
        assert!(matches!(
            load_mesh(oob),
            Err(Error::IndexOutOfRange {
                index: 98,
                vertex_count: 3,
                ..
            })
        ));
    }

    #[test]
    fn obj_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut mesh = shapes::icosphere(1, 0.7);
        mesh.colors = Some(mesh.vertices.iter().map(|v| v.abs()).collect());
        let p = dir.path().join("s.obj");
        save_obj(&mesh, &p).unwrap();
        let back = load_mesh(&p).unwrap();
        assert_eq!(back.vertices, mesh.vertices);
        assert_eq!(back.faces, mesh.faces);
        assert_eq!(back.colors, mesh.colors);
        for (a, b) in back.vertex_normals.iter().zip(&mesh.vertex_normals) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    fn binary_ply(mesh: &Mesh) -> Vec<u8> {
        let mut out = format!(
            "ply\nformat binary_little_endian 1.0\ncomment test\nelement vertex {}\n\
             property float x\nproperty float y\nproperty float z\n\
             element face {}\nproperty list uchar int vertex_indices\nend_header\n",
            mesh.vertex_count(),
            mesh.face_count()
        )
        .into_bytes();
        for v in &mesh.vertices {
            for c in v.iter() {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        for f in &mesh.faces {
            out.push(3);
            for &i in f {
                out.extend_from_slice(&(i as i32).to_le_bytes());
            }
        }
        out
    }

    #[test]
    fn binary_ply_cube() {
        let dir = tempfile::tempdir().unwrap();
        let cube = shapes::unit_cube();
        let p = write(&dir, "c.ply", &binary_ply(&cube));
        let m = load_mesh(&p).unwrap();
        assert_eq!(m.vertex_count(), 8);
        assert_eq!(m.face_count(), 12);
        assert!((m.surface_area() - 6.0).abs() < 1e-12);

        let mut truncated = binary_ply(&cube);
        truncated.truncate(truncated.len() - 5);
        let p = write(&dir, "t.ply", &truncated);
        assert!(matches!(load_mesh(&p), Err(Error::Truncated { .. })));
    }

    #[test]
    fn ascii_ply_with_normals() {
        let dir = tempfile::tempdir().unwrap();
        let text =
            "ply\nformat ascii 1.0\nelement vertex 3\nproperty double x\nproperty double y\n\
                    property double z\nproperty double nx\nproperty double ny\nproperty double nz\n\
                    element face 1\nproperty list uchar uint vertex_index\nend_header\n\
                    0 0 0 0 0 2\n1 0 0 0 0 2\n0 1 0 0 0 2\n3 0 1 2\n";
        let p = write(&dir, "a.ply", text.as_bytes());
        let m = load_mesh(&p).unwrap();
        assert_eq!(m.vertex_normals[0], Vec3::z());
    }
}
