//! Iso-surface extraction with Marching Cubes, plus mesh utilities and OBJ IO.
//!
//! Scalar values live at voxel centers, so cells span between neighbouring
//! centers and the surface stays half a voxel inside the box faces. Each grid
//! edge produces at most one vertex, shared by every cell that touches it,
//! which makes closed surfaces watertight.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fitting::sigmoid;
use crate::geometry::{AxisAlignedBox, Vec3};
use crate::mc_tables::{EDGE_TABLE, TRI_TABLE};
use crate::volume::{GridDims, ObjectVolume};

/// Corner endpoints of the 12 cell edges.
const EDGE_CORNERS: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

// keeps vertices off cell corners so no triangle collapses
const EDGE_PARAM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    /// Counter-clockwise seen from outside.
    pub triangles: Vec<[u32; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshVolume {
    pub volume: f64,
    /// False when some edge is not shared by exactly two triangles.
    pub reliable: bool,
}

fn corner_offset(i: usize) -> (usize, usize, usize) {
    ((i & 1) ^ (i >> 1 & 1), i >> 1 & 1, i >> 2)
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i as usize]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    /// Every undirected edge is used by exactly two triangles, in opposite directions.
    pub fn is_watertight(&self) -> bool {
        if self.triangles.is_empty() {
            return false;
        }
        let mut directed: HashMap<(u32, u32), i32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *directed.entry((a, b)).or_default() += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= n) {
                return Err(Error::Contract(format!(
                    "triangle {i} references a missing vertex"
                )));
            }
            if self.triangle_area(t) <= 1e-12 {
                return Err(Error::Contract(format!("triangle {i} is degenerate")));
            }
        }
        Ok(())
    }

    pub fn flipped(&self) -> Self {
        Self {
            vertices: self.vertices.clone(),
            triangles: self.triangles.iter().map(|t| [t[0], t[2], t[1]]).collect(),
        }
    }

    /// Unit cube `[0, 1]^3` with outward winding.
    pub fn unit_cube() -> Self {
        let vertices = (0..8)
            .map(|i| Vec3::new((i & 1) as f64, (i >> 1 & 1) as f64, (i >> 2 & 1) as f64))
            .collect();
        let quads = [
            [0, 2, 3, 1],
            [4, 5, 7, 6],
            [0, 1, 5, 4],
            [2, 6, 7, 3],
            [0, 4, 6, 2],
            [1, 3, 7, 5],
        ];
        let triangles = quads
            .iter()
            .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
            .collect();
        Self {
            vertices,
            triangles,
        }
    }
}

/// Extracts the `iso` level set of `values` sampled at the voxel centers of
/// a `dims` grid over `bounds`. Triangles face toward lower values.
pub fn extract_isosurface(
    dims: GridDims,
    bounds: &AxisAlignedBox,
    values: &[f64],
    iso: f64,
) -> Result<TriangleMesh> {
    if dims.d < 2 || dims.h < 2 || dims.w < 2 {
        return Err(Error::Domain(
            "marching cubes needs at least 2 voxels per axis".into(),
        ));
    }
    if values.len() != dims.len() {
        return Err(Error::Contract(format!(
            "field has {} values for a {}-voxel grid",
            values.len(),
            dims.len()
        )));
    }
    let center = |x: usize, y: usize, z: usize| -> Vec3 {
        let ijk = [x, y, z];
        let counts = dims.xyz();
        Vec3::from_fn(|a, _| {
            let (lo, hi) = (bounds.min_corner[a], bounds.max_corner[a]);
            lo + (ijk[a] as f64 + 0.5) / counts[a] as f64 * (hi - lo)
        })
    };
    let mut mesh = TriangleMesh::default();
    let mut welded: HashMap<(usize, u8), u32> = HashMap::new();
    for z in 0..dims.d - 1 {
        for y in 0..dims.h - 1 {
            for x in 0..dims.w - 1 {
                let corners: [(usize, usize, usize); 8] = std::array::from_fn(|i| {
                    let (dx, dy, dz) = corner_offset(i);
                    (x + dx, y + dy, z + dz)
                });
                let vals = corners.map(|(cx, cy, cz)| values[dims.index(cz, cy, cx)]);
                let case = vals
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v < iso)
                    .fold(0usize, |acc, (i, _)| acc | 1 << i);
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut edge_vertex = [u32::MAX; 12];
                for (e, &[a, b]) in EDGE_CORNERS.iter().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    // key the vertex by the lower grid point and the edge axis
                    let (pa, pb) = (corners[a], corners[b]);
                    let lower = pa.min(pb);
                    let axis = if pa.0 != pb.0 {
                        0
                    } else if pa.1 != pb.1 {
                        1
                    } else {
                        2
                    };
                    let key = (dims.index(lower.2, lower.1, lower.0), axis);
                    let next_id = mesh.vertices.len() as u32;
                    let id = *welded.entry(key).or_insert_with(|| {
                        let (va, vb) = (vals[a], vals[b]);
                        let t =
                            ((iso - va) / (vb - va)).clamp(EDGE_PARAM_EPS, 1.0 - EDGE_PARAM_EPS);
                        let (qa, qb) = (center(pa.0, pa.1, pa.2), center(pb.0, pb.1, pb.2));
                        mesh.vertices.push(qa + (qb - qa) * t);
                        next_id
                    });
                    edge_vertex[e] = id;
                }
                for tri in TRI_TABLE[case].chunks_exact(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let [a, b, c] = [tri[0], tri[1], tri[2]].map(|e| edge_vertex[e as usize]);
                    mesh.triangles.push([a, b, c]);
                }
            }
        }
    }
    Ok(mesh)
}

/// Surface where `sigmoid(occupancy_logit)` crosses `iso`.
pub fn marching_cubes(volume: &ObjectVolume, iso: f64) -> Result<TriangleMesh> {
    if !(iso > 0.0 && iso < 1.0) {
        return Err(Error::Domain(format!(
            "occupancy iso level {iso} must lie in (0, 1)"
        )));
    }
    let field: Vec<f64> = volume
        .occupancy_logit()
        .iter()
        .map(|&l| sigmoid(l as f64))
        .collect();
    extract_isosurface(volume.dims(), volume.bounds(), &field, iso)
}

/// Surface where density crosses `threshold`, for volumes whose occupancy
/// was never trained.
pub fn marching_cubes_density(volume: &ObjectVolume, threshold: f64) -> Result<TriangleMesh> {
    if !(threshold > 0.0) {
        return Err(Error::Domain("density threshold must be > 0".into()));
    }
    let field: Vec<f64> = volume.density().iter().map(|&d| d as f64).collect();
    extract_isosurface(volume.dims(), volume.bounds(), &field, threshold)
}

/// Occupancy surface when any voxel is occupied, otherwise the density surface.
pub fn extract_object_mesh(
    volume: &ObjectVolume,
    iso: f64,
    density_threshold: f64,
) -> Result<TriangleMesh> {
    if !(iso > 0.0 && iso < 1.0) {
        return Err(Error::Domain(format!(
            "occupancy iso level {iso} must lie in (0, 1)"
        )));
    }
    let logit_iso = (iso / (1.0 - iso)).ln();
    let has_occupancy = volume
        .occupancy_logit()
        .iter()
        .any(|&l| l as f64 > logit_iso);
    if has_occupancy {
        marching_cubes(volume, iso)
    } else {
        marching_cubes_density(volume, density_threshold)
    }
}

/// Signed enclosed volume by the divergence theorem.
pub fn mesh_volume(mesh: &TriangleMesh) -> MeshVolume {
    let volume = mesh
        .triangles
        .iter()
        .map(|t| {
            let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
            a.dot(&b.cross(&c)) / 6.0
        })
        .sum();
    MeshVolume {
        volume,
        reliable: mesh.is_watertight(),
    }
}

pub fn mesh_aabb(mesh: &TriangleMesh) -> Result<AxisAlignedBox> {
    if mesh.vertices.is_empty() {
        return Err(Error::Domain("bounding box of an empty mesh".into()));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in &mesh.vertices {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    // flat meshes still get a valid (thin) box
    for a in 0..3 {
        if hi[a] <= lo[a] {
            hi[a] = lo[a] + 1e-9;
        }
    }
    AxisAlignedBox::new(lo, hi)
}

pub fn obj_string(mesh: &TriangleMesh) -> String {
    let mut s = String::with_capacity(32 * (mesh.vertices.len() + mesh.triangles.len()));
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z);
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    s
}

pub fn export_obj(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, obj_string(mesh)).map_err(|e| Error::io(path, e))
}

/// Reads the `v` and triangular `f` records of an OBJ file.
pub fn read_obj(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut mesh = TriangleMesh::default();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let xyz: Vec<f64> = parts
                    .map(|p| {
                        p.parse::<f64>()
                            .map_err(|e| parse_err(i + 1, e.to_string()))
                    })
                    .collect::<Result<_>>()?;
                if xyz.len() != 3 {
                    return Err(parse_err(i + 1, "vertex needs 3 coordinates".into()));
                }
                mesh.vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = parts
                    .map(|p| {
                        let first = p.split('/').next().unwrap_or(p);
                        first
                            .parse::<u32>()
                            .ok()
                            .filter(|&k| k >= 1)
                            .ok_or_else(|| parse_err(i + 1, format!("bad face index {p:?}")))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(parse_err(
                        i + 1,
                        "only triangular faces are supported".into(),
                    ));
                }
                mesh.triangles.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    Ok(mesh)
}
