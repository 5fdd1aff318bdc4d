//! Triangle meshes: watertightness analysis, binary STL and PLY export, and
//! the matching importers used for round-trips and external tool output.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::config::MeshFormat;
use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::spatial::UnionFind;

use super::OrientedCloud;

/// An indexed triangle mesh.
#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    /// Counter-clockwise vertex-index triples.
    pub facets: Vec<[u32; 3]>,
}

impl TriangleMesh {
    /// Checks index ranges and that no facet repeats a vertex.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for (i, f) in self.facets.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::Data(format!(
                    "facet {i} references vertex {} of {n}",
                    f.iter().max().unwrap()
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Data(format!("facet {i} repeats a vertex: {f:?}")));
            }
        }
        Ok(())
    }

    /// Unit facet normal from the right-hand rule; zero for collapsed
    /// geometry.
    fn facet_normal(&self, f: &[u32; 3]) -> Vector3<f64> {
        let a = self.vertices[f[0] as usize].pos();
        let b = self.vertices[f[1] as usize].pos();
        let c = self.vertices[f[2] as usize].pos();
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vector3::zeros()
        }
    }

    /// Total facet area.
    pub fn surface_area(&self) -> f64 {
        self.facets
            .iter()
            .map(|f| {
                let a = self.vertices[f[0] as usize].pos();
                let b = self.vertices[f[1] as usize].pos();
                let c = self.vertices[f[2] as usize].pos();
                (b - a).cross(&(c - a)).norm() / 2.0
            })
            .sum::<f64>()
    }
}

/// Edge-level mesh diagnosis; `watertight` means every undirected edge
/// borders exactly two facets (and the mesh is non-empty).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WatertightReport {
    pub boundary_edges: usize,
    pub non_manifold_edges: usize,
    /// V - E + F over referenced vertices.
    pub euler_characteristic: i64,
    /// Connected components of the facet graph (isolated vertices ignored).
    pub components: usize,
    pub watertight: bool,
}

/// Counts edge incidences: boundary edges border one facet, non-manifold
/// edges three or more. Euler characteristic and connectivity consider only
/// vertices referenced by at least one facet.
pub fn check_watertight(m: &TriangleMesh) -> WatertightReport {
    let mut edge_count: HashMap<(u32, u32), u32> = HashMap::new();
    let mut referenced: HashMap<u32, ()> = HashMap::new();
    let mut uf = UnionFind::new(m.vertices.len());
    for f in &m.facets {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            let key = (a.min(b), a.max(b));
            *edge_count.entry(key).or_insert(0) += 1;
            uf.union(a as usize, b as usize);
        }
        for &v in f {
            referenced.insert(v, ());
        }
    }
    let boundary = edge_count.values().filter(|&&c| c == 1).count();
    let non_manifold = edge_count.values().filter(|&&c| c >= 3).count();
    let v = referenced.len() as i64;
    let e = edge_count.len() as i64;
    let fc = m.facets.len() as i64;
    let mut roots: HashMap<usize, ()> = HashMap::new();
    for &vid in referenced.keys() {
        roots.insert(uf.find(vid as usize), ());
    }
    WatertightReport {
        boundary_edges: boundary,
        non_manifold_edges: non_manifold,
        euler_characteristic: v - e + fc,
        components: roots.len(),
        watertight: boundary == 0 && non_manifold == 0 && fc > 0,
    }
}

/// Writes the mesh in the requested format; refuses empty meshes.
pub fn export_mesh(m: &TriangleMesh, path: &Path, format: MeshFormat) -> Result<()> {
    if m.vertices.is_empty() || m.facets.is_empty() {
        return Err(Error::Data(
            "refusing to export an empty mesh; reconstruction produced no surface".into(),
        ));
    }
    m.validate()?;
    match format {
        MeshFormat::StlBinary => write_stl(m, path),
        MeshFormat::Ply => write_ply_mesh(m, path),
    }
}

/// Reads a mesh back, dispatching on the file extension (.stl or .ply).
pub fn import_mesh(path: &Path) -> Result<TriangleMesh> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("stl") => read_stl_mesh(path),
        Some("ply") => read_ply_mesh(path),
        other => Err(Error::Data(format!(
            "unsupported mesh extension {other:?} for {}",
            path.display()
        ))),
    }
}

fn write_stl(m: &TriangleMesh, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    let mut header = [0u8; 80];
    let tag = b"weldscan binary STL";
    header[..tag.len()].copy_from_slice(tag);
    out.write_all(&header)?;
    out.write_all(&(m.facets.len() as u32).to_le_bytes())?;
    for f in &m.facets {
        let n = m.facet_normal(f);
        for v in [n.x, n.y, n.z] {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        for &vi in f {
            let p = &m.vertices[vi as usize];
            for v in [p.x, p.y, p.z] {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        out.write_all(&0u16.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a binary STL and welds vertices that share the exact same float32
/// coordinates, restoring connectivity for the watertight analysis.
pub fn read_stl_mesh(path: &Path) -> Result<TriangleMesh> {
    let data = std::fs::read(path)?;
    let parse = |msg: &str| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: msg.into(),
    };
    if data.len() < 84 {
        return Err(parse("shorter than a binary STL header"));
    }
    let count = u32::from_le_bytes(data[80..84].try_into().unwrap()) as usize;
    let expected = 84 + count * 50;
    if data.len() != expected {
        return Err(parse(&format!(
            "size {} does not match {count} facets (expected {expected})",
            data.len()
        )));
    }
    let mut vertices: Vec<Point3> = Vec::new();
    let mut seen: HashMap<[u32; 3], u32> = HashMap::new();
    let mut facets = Vec::with_capacity(count);
    for fi in 0..count {
        let base = 84 + fi * 50 + 12;
        let mut idx = [0u32; 3];
        for (vi, slot) in idx.iter_mut().enumerate() {
            let off = base + vi * 12;
            let bits = [
                u32::from_le_bytes(data[off..off + 4].try_into().unwrap()),
                u32::from_le_bytes(data[off + 4..off + 8].try_into().unwrap()),
                u32::from_le_bytes(data[off + 8..off + 12].try_into().unwrap()),
            ];
            *slot = *seen.entry(bits).or_insert_with(|| {
                let p = Point3::new(
                    f32::from_bits(bits[0]) as f64,
                    f32::from_bits(bits[1]) as f64,
                    f32::from_bits(bits[2]) as f64,
                );
                vertices.push(p);
                (vertices.len() - 1) as u32
            });
        }
        if idx[0] == idx[1] || idx[1] == idx[2] || idx[0] == idx[2] {
            log::warn!("dropping degenerate facet {fi} while reading {}", path.display());
            continue;
        }
        facets.push(idx);
    }
    Ok(TriangleMesh { vertices, facets })
}

fn ply_header(vertex_count: usize, face_count: usize) -> String {
    format!(
        "ply\nformat binary_little_endian 1.0\ncomment weldscan\n\
         element vertex {vertex_count}\n\
         property float x\nproperty float y\nproperty float z\n\
         property float nx\nproperty float ny\nproperty float nz\n\
         element face {face_count}\n\
         property list uchar uint vertex_indices\nend_header\n"
    )
}

fn write_ply_mesh(m: &TriangleMesh, path: &Path) -> Result<()> {
    // Vertex normals are the normalized area-weighted mean of adjacent
    // facet normals (the cross product is already area-weighted).
    let mut nsum = vec![Vector3::<f64>::zeros(); m.vertices.len()];
    for f in &m.facets {
        let a = m.vertices[f[0] as usize].pos();
        let b = m.vertices[f[1] as usize].pos();
        let c = m.vertices[f[2] as usize].pos();
        let n = (b - a).cross(&(c - a));
        for &vi in f {
            nsum[vi as usize] += n;
        }
    }
    let normals: Vec<[f64; 3]> = nsum
        .into_iter()
        .map(|n| {
            let len = n.norm();
            if len > 0.0 {
                [n.x / len, n.y / len, n.z / len]
            } else {
                [0.0, 0.0, 0.0]
            }
        })
        .collect();
    write_ply(path, &m.vertices, &normals, &m.facets)
}

/// Writes an oriented cloud as a face-free PLY, the interchange format for
/// external reconstruction tools.
pub fn write_ply_cloud(oc: &OrientedCloud, path: &Path) -> Result<()> {
    oc.validate()?;
    write_ply(path, &oc.points.points, &oc.normals, &[])
}

fn write_ply(
    path: &Path,
    vertices: &[Point3],
    normals: &[[f64; 3]],
    facets: &[[u32; 3]],
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    out.write_all(ply_header(vertices.len(), facets.len()).as_bytes())?;
    for (p, n) in vertices.iter().zip(normals) {
        for v in [p.x, p.y, p.z, n[0], n[1], n[2]] {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    for f in facets {
        out.write_all(&[3u8])?;
        for &vi in f {
            out.write_all(&vi.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// One property of a PLY vertex element: its name and byte width, with
/// floating point widths 4 or 8 read into f64.
struct PlyProp {
    name: String,
    width: usize,
    float: bool,
}

/// Reads a binary little-endian PLY mesh. Vertices may carry extra
/// properties (normals, quality, ...), which are skipped; faces must be
/// triangles.
pub fn read_ply_mesh(path: &Path) -> Result<TriangleMesh> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut line_no = 0usize;
    let parse = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let read_line = |reader: &mut BufReader<std::fs::File>, line_no: &mut usize| -> Result<String> {
        let mut s = String::new();
        let n = reader.read_line(&mut s)?;
        if n == 0 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: *line_no,
                msg: "unexpected end of header".into(),
            });
        }
        *line_no += 1;
        Ok(s.trim().to_string())
    };

    let magic = read_line(&mut reader, &mut line_no)?;
    if magic != "ply" {
        return Err(parse(line_no, format!("not a PLY file (starts with {magic:?})")));
    }

    let mut vertex_count = 0usize;
    let mut face_count = 0usize;
    let mut vertex_props: Vec<PlyProp> = Vec::new();
    let mut face_list: Option<(usize, usize)> = None;
    let mut current: Option<&'static str> = None;
    loop {
        let line = read_line(&mut reader, &mut line_no)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["format", kind, "1.0"] => {
                if *kind != "binary_little_endian" {
                    return Err(parse(line_no, format!("unsupported PLY format {kind}")));
                }
            }
            ["element", "vertex", n] => {
                vertex_count = n
                    .parse()
                    .map_err(|e| parse(line_no, format!("bad vertex count: {e}")))?;
                current = Some("vertex");
            }
            ["element", "face", n] => {
                face_count = n
                    .parse()
                    .map_err(|e| parse(line_no, format!("bad face count: {e}")))?;
                current = Some("face");
            }
            ["element", other, _] => {
                return Err(parse(line_no, format!("unsupported PLY element {other}")));
            }
            ["property", "list", count_ty, index_ty, _name] => {
                if current != Some("face") {
                    return Err(parse(line_no, "list property outside face element".into()));
                }
                let cw = scalar_width(count_ty)
                    .ok_or_else(|| parse(line_no, format!("bad list count type {count_ty}")))?;
                let iw = scalar_width(index_ty)
                    .ok_or_else(|| parse(line_no, format!("bad list index type {index_ty}")))?;
                face_list = Some((cw.0, iw.0));
            }
            ["property", ty, name] => {
                if current != Some("vertex") {
                    return Err(parse(line_no, format!("unexpected property {name}")));
                }
                let (width, float) = scalar_width(ty)
                    .ok_or_else(|| parse(line_no, format!("bad property type {ty}")))?;
                vertex_props.push(PlyProp {
                    name: (*name).to_string(),
                    width,
                    float,
                });
            }
            _ => return Err(parse(line_no, format!("unrecognised header line {line:?}"))),
        }
    }
    for want in ["x", "y", "z"] {
        if !vertex_props.iter().any(|p| p.name == want && p.float) {
            return Err(parse(line_no, format!("vertex element lacks float property {want}")));
        }
    }
    if face_count > 0 && face_list.is_none() {
        return Err(parse(line_no, "face element lacks a list property".into()));
    }

    let mut vertices = Vec::with_capacity(vertex_count);
    let mut buf = vec![0u8; vertex_props.iter().map(|p| p.width).sum()];
    for _ in 0..vertex_count {
        reader.read_exact(&mut buf)?;
        let mut off = 0usize;
        let mut xyz = [0.0f64; 3];
        for p in &vertex_props {
            let axis = match p.name.as_str() {
                "x" => Some(0),
                "y" => Some(1),
                "z" => Some(2),
                _ => None,
            };
            if let Some(a) = axis {
                xyz[a] = match p.width {
                    4 => f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as f64,
                    8 => f64::from_le_bytes(buf[off..off + 8].try_into().unwrap()),
                    _ => unreachable!("float widths are 4 or 8"),
                };
            }
            off += p.width;
        }
        vertices.push(Point3::new(xyz[0], xyz[1], xyz[2]));
    }

    let mut facets = Vec::with_capacity(face_count);
    if let Some((cw, iw)) = face_list {
        let mut small = [0u8; 8];
        for fi in 0..face_count {
            reader.read_exact(&mut small[..cw])?;
            let n = le_uint(&small[..cw]);
            if n != 3 {
                return Err(parse(0, format!("face {fi} has {n} vertices; only triangles are supported")));
            }
            let mut f = [0u32; 3];
            for slot in &mut f {
                reader.read_exact(&mut small[..iw])?;
                *slot = le_uint(&small[..iw]) as u32;
            }
            facets.push(f);
        }
    }
    let mesh = TriangleMesh { vertices, facets };
    mesh.validate()?;
    Ok(mesh)
}

/// Byte width and floatness of a PLY scalar type name.
fn scalar_width(ty: &str) -> Option<(usize, bool)> {
    match ty {
        "char" | "uchar" | "int8" | "uint8" => Some((1, false)),
        "short" | "ushort" | "int16" | "uint16" => Some((2, false)),
        "int" | "uint" | "int32" | "uint32" => Some((4, false)),
        "float" | "float32" => Some((4, true)),
        "double" | "float64" => Some((8, true)),
        _ => None,
    }
}

fn le_uint(bytes: &[u8]) -> u64 {
    let mut v = 0u64;
    for (i, b) in bytes.iter().enumerate() {
        v |= (*b as u64) << (8 * i);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tetrahedron() -> TriangleMesh {
        TriangleMesh {
            vertices: vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
                Point3::new(0.0, 0.0, 1.0),
            ],
            facets: vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]],
        }
    }

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("weldscan-mesh-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn closed_tetrahedron_is_watertight_with_euler_two() {
        let report = check_watertight(&tetrahedron());
        assert!(report.watertight);
        assert_eq!(report.boundary_edges, 0);
        assert_eq!(report.non_manifold_edges, 0);
        assert_eq!(report.euler_characteristic, 2);
        assert_eq!(report.components, 1);
    }

    #[test]
    fn tetrahedron_missing_a_facet_has_three_boundary_edges() {
        let mut m = tetrahedron();
        m.facets.pop();
        let report = check_watertight(&m);
        assert!(!report.watertight);
        assert_eq!(report.boundary_edges, 3);
        assert_eq!(report.non_manifold_edges, 0);
    }

    #[test]
    fn disjoint_tetrahedra_sum_euler_characteristics() {
        let a = tetrahedron();
        let mut b = tetrahedron();
        for v in &mut b.vertices {
            v.x += 10.0;
        }
        let mut m = a;
        let off = m.vertices.len() as u32;
        m.vertices.extend(b.vertices);
        m.facets
            .extend(b.facets.iter().map(|f| [f[0] + off, f[1] + off, f[2] + off]));
        let report = check_watertight(&m);
        assert!(report.watertight);
        assert_eq!(report.euler_characteristic, 4);
        assert_eq!(report.components, 2);
    }

    #[test]
    fn non_manifold_edge_is_reported() {
        // Three facets share the edge (0, 1).
        let m = TriangleMesh {
            vertices: vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
                Point3::new(0.0, -1.0, 0.0),
                Point3::new(0.0, 0.0, 1.0),
            ],
            facets: vec![[0, 1, 2], [0, 1, 3], [0, 1, 4]],
        };
        let report = check_watertight(&m);
        assert_eq!(report.non_manifold_edges, 1);
        assert!(!report.watertight);
    }

    #[test]
    fn single_triangle_stl_is_exactly_134_bytes() {
        let m = TriangleMesh {
            vertices: vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
            ],
            facets: vec![[0, 1, 2]],
        };
        let dir = tmpdir("stl134");
        let path = dir.join("one.stl");
        export_mesh(&m, &path, MeshFormat::StlBinary).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 134);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn stl_round_trip_preserves_facets_and_float32_vertices() {
        let m = tetrahedron();
        let dir = tmpdir("stlrt");
        let path = dir.join("tet.stl");
        export_mesh(&m, &path, MeshFormat::StlBinary).unwrap();
        let back = read_stl_mesh(&path).unwrap();
        assert_eq!(back.facets.len(), m.facets.len());
        assert_eq!(back.vertices.len(), m.vertices.len());
        let report = check_watertight(&back);
        assert!(report.watertight);
        // Welding keys on exact float32 bits, so coordinates match exactly.
        for f in &m.facets {
            for &vi in f {
                let p = m.vertices[vi as usize];
                assert!(back.vertices.iter().any(|q| {
                    (q.x as f32, q.y as f32, q.z as f32)
                        == (p.x as f32, p.y as f32, p.z as f32)
                }));
            }
        }
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn ply_round_trip_is_bit_exact_in_float32() {
        let m = TriangleMesh {
            vertices: vec![
                Point3::new(0.1, 0.2, 0.3),
                Point3::new(-1.5, 2.25, 0.125),
                Point3::new(3.75, -0.875, 2.5),
                Point3::new(0.0, 1.0, -1.0),
            ],
            facets: vec![[0, 1, 2], [0, 2, 3]],
        };
        let dir = tmpdir("plyrt");
        let path = dir.join("mesh.ply");
        export_mesh(&m, &path, MeshFormat::Ply).unwrap();
        let back = read_ply_mesh(&path).unwrap();
        assert_eq!(back.facets, m.facets);
        assert_eq!(back.vertices.len(), m.vertices.len());
        for (p, q) in m.vertices.iter().zip(&back.vertices) {
            assert_eq!((p.x as f32).to_bits(), (q.x as f32).to_bits());
            assert_eq!((p.y as f32).to_bits(), (q.y as f32).to_bits());
            assert_eq!((p.z as f32).to_bits(), (q.z as f32).to_bits());
        }
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn empty_mesh_export_is_refused() {
        let dir = tmpdir("empty");
        let err = export_mesh(&TriangleMesh::default(), &dir.join("x.stl"), MeshFormat::StlBinary);
        assert!(err.is_err());
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn truncated_stl_is_a_parse_error() {
        let dir = tmpdir("trunc");
        let path = dir.join("bad.stl");
        std::fs::write(&path, vec![0u8; 90]).unwrap();
        assert!(matches!(read_stl_mesh(&path), Err(Error::Parse { .. })));
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn ply_with_doubles_and_extra_properties_is_read() {
        // Hand-built PLY: double coordinates plus an extra quality property.
        let dir = tmpdir("plyext");
        let path = dir.join("ext.ply");
        let header = "ply\nformat binary_little_endian 1.0\nelement vertex 3\n\
                      property double x\nproperty double y\nproperty double z\n\
                      property float quality\nelement face 1\n\
                      property list uchar int vertex_indices\nend_header\n";
        let mut bytes = header.as_bytes().to_vec();
        let corners: [(f64, f64, f64); 3] = [(0.0, 0.0, 0.0), (1.0, 0.0, 0.5), (0.0, 1.0, 0.25)];
        for (x, y, z) in corners {
            bytes.extend_from_slice(&x.to_le_bytes());
            bytes.extend_from_slice(&y.to_le_bytes());
            bytes.extend_from_slice(&z.to_le_bytes());
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        bytes.push(3);
        for i in [0i32, 1, 2] {
            bytes.extend_from_slice(&i.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let mesh = read_ply_mesh(&path).unwrap();
        assert_eq!(mesh.vertices.len(), 3);
        assert_eq!(mesh.facets, vec![[0, 1, 2]]);
        assert!((mesh.vertices[1].z - 0.5).abs() < 1e-15);
        std::fs::remove_dir_all(dir).ok();
    }
}
