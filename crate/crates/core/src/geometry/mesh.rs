use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MESH_MAGIC: &[u8; 8] = b"PNSMESH\0";
const MESH_VERSION: u32 = 1;

/// Triangulated surface: vertex coordinates in mm and vertex-index triangles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshGeometry {
    pub name: String,
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl MeshGeometry {
    pub fn new(name: impl Into<String>, vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Self {
        Self { name: name.into(), vertices, faces }
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Checks the mesh invariants: in-range, non-degenerate faces, no isolated
    /// vertices and no coincident vertices.
    pub fn validate(&self) -> Result<()> {
        if self.vertices.is_empty() || self.faces.is_empty() {
            return Err(Error::EmptyGeometry);
        }
        let n = self.vertices.len();
        let mut touched = vec![false; n];
        for (index, face) in self.faces.iter().enumerate() {
            if face.iter().any(|&v| v >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {index} {face:?} references a vertex ≥ {n}"
                )));
            }
            if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
                return Err(Error::DegenerateFace { index, face: *face });
            }
            for &v in face {
                touched[v] = true;
            }
        }
        if let Some(v) = touched.iter().position(|t| !t) {
            return Err(Error::InvalidMesh(format!("vertex {v} has no incident edge")));
        }
        if let Some((a, b)) = coincident_pair(&self.vertices, 1e-9) {
            return Err(Error::InvalidMesh(format!("vertices {a} and {b} coincide")));
        }
        Ok(())
    }

    /// Flat `nx × ny` sheet in the z = 0 plane, each quad split along the
    /// (i, j)–(i+1, j+1) diagonal.
    pub fn grid(nx: usize, ny: usize, spacing: f64) -> Self {
        let idx = |i: usize, j: usize| j * nx + i;
        let mut vertices = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                vertices.push([i as f64 * spacing, j as f64 * spacing, 0.0]);
            }
        }
        let mut faces = Vec::new();
        for j in 0..ny.saturating_sub(1) {
            for i in 0..nx.saturating_sub(1) {
                faces.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
                faces.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            }
        }
        Self::new(format!("grid{nx}x{ny}"), vertices, faces)
    }

    /// Subdivided icosahedron of the given radius (12, 42, 162, 642, ... vertices).
    pub fn icosphere(subdivisions: usize, radius: f64) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut vertices: Vec<[f64; 3]> = vec![
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ];
        let mut faces: Vec<[usize; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        let project = |p: [f64; 3]| {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            [p[0] / n * radius, p[1] / n * radius, p[2] / n * radius]
        };
        for v in vertices.iter_mut() {
            *v = project(*v);
        }
        for _ in 0..subdivisions {
            let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
            let mut next = Vec::with_capacity(faces.len() * 4);
            let mut mid = |a: usize, b: usize, vertices: &mut Vec<[f64; 3]>| {
                let key = (a.min(b), a.max(b));
                *midpoint.entry(key).or_insert_with(|| {
                    let (pa, pb) = (vertices[a], vertices[b]);
                    vertices.push(project([
                        (pa[0] + pb[0]) / 2.0,
                        (pa[1] + pb[1]) / 2.0,
                        (pa[2] + pb[2]) / 2.0,
                    ]));
                    vertices.len() - 1
                })
            };
            for [a, b, c] in faces {
                let ab = mid(a, b, &mut vertices);
                let bc = mid(b, c, &mut vertices);
                let ca = mid(c, a, &mut vertices);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        Self::new(format!("icosphere{subdivisions}"), vertices, faces)
    }

    /// Writes the binary mesh container: magic, version, name, vertex and
    /// face counts, then vertices as float64 N×3 and faces as int64 M×3,
    /// all little-endian.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MESH_MAGIC)?;
        w.write_all(&MESH_VERSION.to_le_bytes())?;
        let name = self.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(self.vertices.len() as u64).to_le_bytes())?;
        w.write_all(&(self.faces.len() as u64).to_le_bytes())?;
        for v in &self.vertices {
            for c in v {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        for f in &self.faces {
            for &i in f {
                w.write_all(&(i as i64).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MESH_MAGIC {
            return Err(Error::Format(format!("{} is not a mesh file", path.display())));
        }
        let version = read_u32(&mut r)?;
        if version != MESH_VERSION {
            return Err(Error::Format(format!("unsupported mesh version {version}")));
        }
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let nv = read_u64(&mut r)? as usize;
        let nf = read_u64(&mut r)? as usize;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            vertices.push([read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?]);
        }
        let mut faces = Vec::with_capacity(nf);
        for _ in 0..nf {
            let mut f = [0usize; 3];
            for slot in f.iter_mut() {
                let i = read_i64(&mut r)?;
                *slot = usize::try_from(i)
                    .map_err(|_| Error::Format(format!("negative face index {i}")))?;
            }
            faces.push(f);
        }
        Ok(Self { name, vertices, faces })
    }
}

fn coincident_pair(vertices: &[[f64; 3]], tol: f64) -> Option<(usize, usize)> {
    let mut order: Vec<usize> = (0..vertices.len()).collect();
    order.sort_by(|&a, &b| vertices[a][0].total_cmp(&vertices[b][0]));
    for (k, &a) in order.iter().enumerate() {
        for &b in &order[k + 1..] {
            if vertices[b][0] - vertices[a][0] > tol {
                break;
            }
            let d2: f64 = (0..3).map(|c| (vertices[a][c] - vertices[b][c]).powi(2)).sum();
            if d2.sqrt() <= tol {
                return Some((a.min(b), a.max(b)));
            }
        }
    }
    None
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_i64(r: &mut impl Read) -> Result<i64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(i64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_and_sphere_are_valid() {
        MeshGeometry::grid(5, 4, 1.0).validate().unwrap();
        let s = MeshGeometry::icosphere(2, 10.0);
        assert_eq!(s.vertex_count(), 162);
        s.validate().unwrap();
    }

    #[test]
    fn rejects_bad_meshes() {
        let empty = MeshGeometry::new("e", vec![], vec![]);
        assert!(matches!(empty.validate(), Err(Error::EmptyGeometry)));
        let degenerate =
            MeshGeometry::new("d", vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 0, 2]]);
        assert!(matches!(degenerate.validate(), Err(Error::DegenerateFace { index: 0, .. })));
        let twins = MeshGeometry::new(
            "t",
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 0.0, 1e-12]],
            vec![[0, 1, 2]],
        );
        assert!(matches!(twins.validate(), Err(Error::InvalidMesh(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mesh");
        let mesh = MeshGeometry::icosphere(1, 3.0);
        mesh.write(&path).unwrap();
        assert_eq!(MeshGeometry::read(&path).unwrap(), mesh);
    }
}
