//! Surface reconstruction backends.
//!
//! The built-in backend samples a signed distance field on a uniform grid
//! (sign and magnitude from the tangent plane of the nearest oriented point)
//! and extracts the zero level set with marching cubes. The external backend
//! writes the cloud to PLY, runs a user-configured command, and parses the
//! mesh it produces.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::spatial::KdTree3;

use super::mesh::{read_ply_mesh, write_ply_cloud, TriangleMesh};
use super::OrientedCloud;

/// Cap on the signed-distance grid allocation.
const MAX_GRID_BYTES: f64 = 2.0 * 1024.0 * 1024.0 * 1024.0;

/// Padding around the cloud bounds, in cells, so closed surfaces never touch
/// the grid boundary.
const PAD_CELLS: f64 = 3.0;

/// Cube corner numbering: bit 0 = +x, bit 1 = +y, bit 2 = +z.
/// The twelve cube edges as corner pairs, grouped by axis (x, y, z).
const EDGES: [(usize, usize); 12] = [
    (0, 1), (2, 3), (4, 5), (6, 7), // x
    (0, 2), (1, 3), (4, 6), (5, 7), // y
    (0, 4), (1, 5), (2, 6), (3, 7), // z
];

/// Cube faces as cyclically ordered corner quadruples.
const FACES: [[usize; 4]; 6] = [
    [0, 2, 6, 4], // x = 0
    [1, 3, 7, 5], // x = 1
    [0, 1, 5, 4], // y = 0
    [2, 3, 7, 6], // y = 1
    [0, 1, 3, 2], // z = 0
    [4, 5, 7, 6], // z = 1
];

/// Edge index of the cyclic face edge (corner i, corner i+1), per face.
const FACE_EDGES: [[usize; 4]; 6] = [
    [4, 10, 6, 8],
    [5, 11, 7, 9],
    [0, 9, 2, 8],
    [1, 11, 3, 10],
    [0, 5, 1, 4],
    [2, 7, 3, 6],
];

/// A grid edge: axis (0..3) plus the grid coordinates of its lower endpoint.
/// Identifies each marching-cubes vertex uniquely across cubes and slabs.
type EdgeKey = (u8, u32, u32, u32);

struct Grid {
    origin: Vector3<f64>,
    cell: f64,
    n: [usize; 3],
}

impl Grid {
    fn point(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        self.origin + Vector3::new(ix as f64, iy as f64, iz as f64) * self.cell
    }

    fn idx(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.n[1] + iy) * self.n[0] + ix
    }

    /// Position of the level-set crossing on a grid edge, by linear
    /// interpolation of the field values; the offset is clamped away from
    /// the endpoints so vertices of different edges never coincide.
    fn edge_vertex(&self, key: EdgeKey, sdf: &[f64]) -> Point3 {
        let (axis, ix, iy, iz) = key;
        let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
        let a = sdf[self.idx(ix, iy, iz)];
        let step = [
            (axis == 0) as usize,
            (axis == 1) as usize,
            (axis == 2) as usize,
        ];
        let b = sdf[self.idx(ix + step[0], iy + step[1], iz + step[2])];
        let t = (a / (a - b)).clamp(1e-4, 1.0 - 1e-4);
        let p = self.point(ix, iy, iz)
            + Vector3::new(step[0] as f64, step[1] as f64, step[2] as f64) * (t * self.cell);
        Point3::new(p.x, p.y, p.z)
    }
}

/// Reconstructs a triangle mesh from an oriented cloud without external
/// tools. The signed distance of a grid point is its distance to the tangent
/// plane of the nearest cloud point, negative behind the normal; marching
/// cubes meshes the zero level set. Closed, well-sampled inputs yield
/// watertight output; open sheets yield meshes with boundary edges.
pub fn reconstruct_builtin(oc: &OrientedCloud, cell: f64) -> Result<TriangleMesh> {
    oc.validate()?;
    if oc.points.is_empty() {
        return Err(Error::Data("cannot reconstruct an empty cloud".into()));
    }
    if !(cell.is_finite() && cell > 0.0) {
        return Err(Error::Config(format!("cell size must be positive, got {cell}")));
    }
    let (lo, hi) = oc.points.bounds().expect("cloud is non-empty");
    let pad = PAD_CELLS * cell;

    let mut n = [0usize; 3];
    let mut bytes = 8.0;
    for a in 0..3 {
        let count = ((hi[a] - lo[a] + 2.0 * pad) / cell).ceil() + 2.0;
        bytes *= count;
        n[a] = count as usize;
    }
    if bytes > MAX_GRID_BYTES {
        return Err(Error::Config(format!(
            "signed-distance grid of {}x{}x{} points needs {:.1} GiB; \
             increase the cell size (currently {cell} mm)",
            n[0], n[1], n[2],
            bytes / (1024.0 * 1024.0 * 1024.0),
        )));
    }
    let grid = Grid {
        origin: Vector3::new(lo[0] - pad, lo[1] - pad, lo[2] - pad),
        cell,
        n,
    };

    let positions = oc.points.positions();
    let tree = KdTree3::build(&positions);
    let mut sdf = vec![0.0f64; n[0] * n[1] * n[2]];
    sdf.par_chunks_mut(n[0] * n[1])
        .enumerate()
        .for_each(|(iz, slab)| {
            for iy in 0..n[1] {
                for ix in 0..n[0] {
                    let g = grid.point(ix, iy, iz);
                    let (pi, _) = tree.knn([g.x, g.y, g.z], 1)[0];
                    let p = Vector3::from(positions[pi]);
                    let nrm = Vector3::from(oc.normals[pi]);
                    slab[iy * n[0] + ix] = (g - p).dot(&nrm);
                }
            }
        });

    // One slab of cubes per z layer; each yields triangles as edge-key
    // triples, stitched serially in slab order for deterministic indices.
    let slabs: Vec<Vec<[EdgeKey; 3]>> = (0..n[2] - 1)
        .into_par_iter()
        .map(|iz| march_slab(&grid, &sdf, iz))
        .collect();

    let mut key_index: HashMap<EdgeKey, u32> = HashMap::new();
    let mut vertices: Vec<Point3> = Vec::new();
    let mut facets: Vec<[u32; 3]> = Vec::new();
    for tri in slabs.into_iter().flatten() {
        let mut f = [0u32; 3];
        for (slot, key) in f.iter_mut().zip(tri) {
            *slot = *key_index.entry(key).or_insert_with(|| {
                vertices.push(grid.edge_vertex(key, &sdf));
                (vertices.len() - 1) as u32
            });
        }
        facets.push(f);
    }
    Ok(TriangleMesh { vertices, facets })
}

/// Marches every cube whose lower z corner is `iz`, returning oriented
/// triangles as edge-key triples.
fn march_slab(grid: &Grid, sdf: &[f64], iz: usize) -> Vec<[EdgeKey; 3]> {
    let mut out = Vec::new();
    for iy in 0..grid.n[1] - 1 {
        for ix in 0..grid.n[0] - 1 {
            march_cube(grid, sdf, ix, iy, iz, &mut out);
        }
    }
    out
}

/// Extracts the level-set pieces inside one cube.
///
/// Crossing points on cube edges are joined into segments face by face (a
/// face with four crossings is disambiguated by the sign of the bilinear
/// field at its saddle point, which depends only on shared face data, so
/// neighbouring cubes always agree and the mesh has no cracks). Every
/// crossing edge then borders exactly two segments, so the segments close
/// into loops; each loop is fan-triangulated, oriented along the field
/// gradient.
fn march_cube(
    grid: &Grid,
    sdf: &[f64],
    ix: usize,
    iy: usize,
    iz: usize,
    out: &mut Vec<[EdgeKey; 3]>,
) {
    let mut vals = [0.0f64; 8];
    let mut mask = 0u8;
    for (c, v) in vals.iter_mut().enumerate() {
        *v = sdf[grid.idx(ix + (c & 1), iy + ((c >> 1) & 1), iz + ((c >> 2) & 1))];
        if *v < 0.0 {
            mask |= 1 << c;
        }
    }
    if mask == 0 || mask == 0xff {
        return;
    }
    let inside = |c: usize| mask & (1 << c) != 0;

    // Segment adjacency: each crossing edge meets exactly one segment in
    // each of its two faces.
    let mut adj = [[usize::MAX; 2]; 12];
    let mut deg = [0usize; 12];
    let link = |adj: &mut [[usize; 2]; 12], deg: &mut [usize; 12], a: usize, b: usize| {
        adj[a][deg[a]] = b;
        deg[a] += 1;
        adj[b][deg[b]] = a;
        deg[b] += 1;
    };
    for (face, corners) in FACES.iter().enumerate() {
        let crossed: Vec<usize> = (0..4)
            .filter(|&i| inside(corners[i]) != inside(corners[(i + 1) % 4]))
            .collect();
        let e = |i: usize| FACE_EDGES[face][i];
        match crossed.len() {
            0 => {}
            2 => link(&mut adj, &mut deg, e(crossed[0]), e(crossed[1])),
            4 => {
                // Corners alternate inside/outside. The bilinear field over
                // the face has one saddle; its sign decides which diagonal
                // pair of corners is connected across the face.
                let (v0, v1, v2, v3) = (
                    vals[corners[0]],
                    vals[corners[1]],
                    vals[corners[2]],
                    vals[corners[3]],
                );
                let den = v0 + v2 - v1 - v3;
                let saddle = if den.abs() > f64::EPSILON {
                    (v0 * v2 - v1 * v3) / den
                } else {
                    0.0
                };
                if (saddle < 0.0) == inside(corners[0]) {
                    // Diagonal corner0-corner2 connected: segments wrap
                    // corner1 and corner3.
                    link(&mut adj, &mut deg, e(0), e(1));
                    link(&mut adj, &mut deg, e(2), e(3));
                } else {
                    link(&mut adj, &mut deg, e(3), e(0));
                    link(&mut adj, &mut deg, e(1), e(2));
                }
            }
            _ => unreachable!("a face has an even number of sign changes"),
        }
    }

    // Trilinear gradient at the cube centre; the surface faces uphill.
    let mut gradient = Vector3::zeros();
    for (c, v) in vals.iter().enumerate() {
        gradient.x += if c & 1 != 0 { *v } else { -*v };
        gradient.y += if c & 2 != 0 { *v } else { -*v };
        gradient.z += if c & 4 != 0 { *v } else { -*v };
    }

    let key = |e: usize| -> EdgeKey {
        let (a, _) = EDGES[e];
        let axis = (e / 4) as u8;
        (
            axis,
            (ix + (a & 1)) as u32,
            (iy + ((a >> 1) & 1)) as u32,
            (iz + ((a >> 2) & 1)) as u32,
        )
    };

    let mut visited = [false; 12];
    for start in 0..12 {
        if deg[start] == 0 || visited[start] {
            continue;
        }
        let mut cycle = vec![start];
        visited[start] = true;
        let mut prev = start;
        let mut cur = adj[start][0];
        while cur != start {
            visited[cur] = true;
            cycle.push(cur);
            let next = if adj[cur][0] == prev { adj[cur][1] } else { adj[cur][0] };
            prev = cur;
            cur = next;
        }

        let pts: Vec<Vector3<f64>> = cycle
            .iter()
            .map(|&e| grid.edge_vertex(key(e), sdf).pos())
            .collect();
        let mut area = Vector3::zeros();
        for (i, p) in pts.iter().enumerate() {
            area += p.cross(&pts[(i + 1) % pts.len()]);
        }
        if area.dot(&gradient) < 0.0 {
            cycle.reverse();
        }
        for i in 1..cycle.len() - 1 {
            out.push([key(cycle[0]), key(cycle[i]), key(cycle[i + 1])]);
        }
    }
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn temp_path(tag: &str, ext: &str) -> PathBuf {
    let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    std::env::temp_dir().join(format!("weldscan-{tag}-{}-{n}.{ext}", std::process::id()))
}

fn clip(bytes: &[u8]) -> String {
    let text = String::from_utf8_lossy(bytes);
    let text = text.trim();
    if text.len() > 2000 {
        format!("{}...", &text[..2000])
    } else {
        text.to_string()
    }
}

/// Runs an external reconstruction command.
///
/// The cloud is written to a temporary PLY file; the template is split on
/// whitespace and each token has `{input}`, `{output}` and `{depth}`
/// replaced literally (depth is passed through verbatim). The command runs
/// without a shell and must write a PLY mesh to the `{output}` path.
pub fn reconstruct_external(oc: &OrientedCloud, depth: u32, template: &str) -> Result<TriangleMesh> {
    oc.validate()?;
    if !template.contains("{output}") {
        return Err(Error::Config(
            "external tool template must contain the {output} placeholder".into(),
        ));
    }
    let input = temp_path("recon-in", "ply");
    let output = temp_path("recon-out", "ply");
    write_ply_cloud(oc, &input)?;
    let depth_text = depth.to_string();
    let argv: Vec<String> = template
        .split_whitespace()
        .map(|token| {
            token
                .replace("{input}", &input.display().to_string())
                .replace("{output}", &output.display().to_string())
                .replace("{depth}", &depth_text)
        })
        .collect();
    let result = run_tool(&argv, &output);
    let _ = std::fs::remove_file(&input);
    let _ = std::fs::remove_file(&output);
    result
}

fn run_tool(argv: &[String], output: &Path) -> Result<TriangleMesh> {
    if argv.is_empty() {
        return Err(Error::Config("external tool template is empty".into()));
    }
    let program = &argv[0];
    let run = std::process::Command::new(program)
        .args(&argv[1..])
        .output()
        .map_err(|e| Error::Tool(format!("cannot launch {program}: {e}")))?;
    if !run.status.success() {
        return Err(Error::Tool(format!(
            "{program} failed ({}): {} {}",
            run.status,
            clip(&run.stdout),
            clip(&run.stderr),
        )));
    }
    if !output.exists() {
        return Err(Error::Tool(format!(
            "{program} exited cleanly but wrote no mesh to {}",
            output.display()
        )));
    }
    read_ply_mesh(output)
}

#[cfg(test)]
mod tests {
    use super::super::mesh::{check_watertight, export_mesh};
    use super::*;
    use crate::config::MeshFormat;
    use crate::geom::{Frame, PointCloud};

    fn oriented(points: Vec<Point3>, normals: Vec<[f64; 3]>) -> OrientedCloud {
        OrientedCloud {
            points: PointCloud::new(points, None, Frame::Reference),
            normals,
        }
    }

    /// Evenly distributed sphere samples with exact radial normals.
    fn sphere_cloud(n: usize, radius: f64) -> OrientedCloud {
        let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
        let mut points = Vec::with_capacity(n);
        let mut normals = Vec::with_capacity(n);
        for i in 0..n {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let rho = (1.0 - z * z).sqrt();
            let phi = 2.0 * std::f64::consts::PI * i as f64 / golden;
            let d = [rho * phi.cos(), rho * phi.sin(), z];
            points.push(Point3::new(radius * d[0], radius * d[1], radius * d[2]));
            normals.push(d);
        }
        oriented(points, normals)
    }

    /// Cube surface samples on a per-face lattice with outward normals.
    fn cube_cloud(half: f64, step: f64) -> OrientedCloud {
        let mut points = Vec::new();
        let mut normals = Vec::new();
        let k = (2.0 * half / step).round() as i64;
        for axis in 0..3usize {
            for side in [-1.0, 1.0] {
                for i in 0..=k {
                    for j in 0..=k {
                        let (u, v) = (-half + i as f64 * step, -half + j as f64 * step);
                        let mut p = [0.0; 3];
                        p[axis] = side * half;
                        p[(axis + 1) % 3] = u;
                        p[(axis + 2) % 3] = v;
                        let mut n = [0.0; 3];
                        n[axis] = side;
                        points.push(Point3::new(p[0], p[1], p[2]));
                        normals.push(n);
                    }
                }
            }
        }
        oriented(points, normals)
    }

    #[test]
    fn sphere_mesh_is_watertight_with_euler_two_and_small_radial_error() {
        let cloud = sphere_cloud(10_000, 10.0);
        let mesh = reconstruct_builtin(&cloud, 0.5).unwrap();
        let report = check_watertight(&mesh);
        assert!(report.watertight, "{report:?}");
        assert_eq!(report.euler_characteristic, 2);
        assert_eq!(report.components, 1);
        let mean_err = mesh
            .vertices
            .iter()
            .map(|v| (v.pos().norm() - 10.0).abs())
            .sum::<f64>()
            / mesh.vertices.len() as f64;
        assert!(mean_err < 0.25, "mean radial error {mean_err}");
    }

    #[test]
    fn cube_mesh_area_matches_analytic_surface() {
        let cloud = cube_cloud(10.0, 0.5);
        let mesh = reconstruct_builtin(&cloud, 0.5).unwrap();
        let report = check_watertight(&mesh);
        assert!(report.watertight, "{report:?}");
        let area = mesh.surface_area();
        assert!(
            (area - 2400.0).abs() < 0.05 * 2400.0,
            "area {area} vs analytic 2400"
        );
    }

    #[test]
    fn open_sheet_is_reported_not_watertight_without_error() {
        let mut points = Vec::new();
        let mut normals = Vec::new();
        for i in 0..=30 {
            for j in 0..=30 {
                points.push(Point3::new(i as f64, j as f64, 0.0));
                normals.push([0.0, 0.0, 1.0]);
            }
        }
        let mesh = reconstruct_builtin(&oriented(points, normals), 1.0).unwrap();
        let report = check_watertight(&mesh);
        assert!(!report.watertight);
        assert!(report.boundary_edges > 0);
        assert_eq!(report.non_manifold_edges, 0);
    }

    #[test]
    fn oversized_grid_is_rejected_with_cell_hint() {
        let cloud = sphere_cloud(100, 10.0);
        let err = reconstruct_builtin(&cloud, 1e-4).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cell"), "{msg}");
    }

    #[test]
    fn empty_cloud_is_rejected() {
        assert!(reconstruct_builtin(&oriented(Vec::new(), Vec::new()), 0.5).is_err());
    }

    #[test]
    fn reconstruction_is_deterministic_across_runs() {
        let cloud = sphere_cloud(2_000, 5.0);
        let a = reconstruct_builtin(&cloud, 1.0).unwrap();
        let b = reconstruct_builtin(&cloud, 1.0).unwrap();
        assert_eq!(a.facets, b.facets);
        assert_eq!(a.vertices.len(), b.vertices.len());
        for (p, q) in a.vertices.iter().zip(&b.vertices) {
            assert_eq!(p.x.to_bits(), q.x.to_bits());
            assert_eq!(p.y.to_bits(), q.y.to_bits());
            assert_eq!(p.z.to_bits(), q.z.to_bits());
        }
    }

    fn fixture_mesh() -> TriangleMesh {
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

    fn tiny_cloud() -> OrientedCloud {
        oriented(
            vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)],
            vec![[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]],
        )
    }

    #[cfg(unix)]
    fn write_script(body: &str) -> PathBuf {
        use std::os::unix::fs::PermissionsExt;
        let path = temp_path("tool", "sh");
        std::fs::write(&path, body).unwrap();
        std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
        path
    }

    #[test]
    #[cfg(unix)]
    fn identity_copy_tool_round_trips_a_fixture_mesh() {
        let fixture = temp_path("fixture", "ply");
        export_mesh(&fixture_mesh(), &fixture, MeshFormat::Ply).unwrap();
        let template = format!("cp {} {{output}}", fixture.display());
        let mesh = reconstruct_external(&tiny_cloud(), 12, &template).unwrap();
        assert_eq!(mesh.facets, fixture_mesh().facets);
        assert_eq!(mesh.vertices.len(), 4);
        std::fs::remove_file(fixture).ok();
    }

    #[test]
    #[cfg(unix)]
    fn depth_is_substituted_verbatim_into_the_command() {
        let fixture = temp_path("fixture", "ply");
        export_mesh(&fixture_mesh(), &fixture, MeshFormat::Ply).unwrap();
        let marker = temp_path("depth", "txt");
        let script = write_script(&format!(
            "#!/bin/sh\nprintf '%s' \"$3\" > {}\ncp {} \"$2\"\n",
            marker.display(),
            fixture.display()
        ));
        let template = format!("{} {{input}} {{output}} {{depth}}", script.display());
        reconstruct_external(&tiny_cloud(), 12, &template).unwrap();
        assert_eq!(std::fs::read_to_string(&marker).unwrap(), "12");
        for p in [fixture, marker, script] {
            std::fs::remove_file(p).ok();
        }
    }

    #[test]
    fn missing_executable_error_names_the_command() {
        let template = "/no/such/tool-xyzzy {input} {output} {depth}";
        let err = reconstruct_external(&tiny_cloud(), 12, template).unwrap_err();
        assert!(matches!(err, Error::Tool(_)));
        assert!(err.to_string().contains("tool-xyzzy"), "{err}");
    }

    #[test]
    #[cfg(unix)]
    fn failing_tool_error_carries_its_output() {
        let script = write_script("#!/bin/sh\necho boom >&2\nexit 3\n");
        let template = format!("{} {{input}} {{output}} {{depth}}", script.display());
        let err = reconstruct_external(&tiny_cloud(), 12, &template).unwrap_err();
        assert!(matches!(err, Error::Tool(_)));
        assert!(err.to_string().contains("boom"), "{err}");
        std::fs::remove_file(script).ok();
    }

    #[test]
    fn template_without_output_placeholder_is_rejected() {
        let err = reconstruct_external(&tiny_cloud(), 12, "cp {input} /dev/null").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
