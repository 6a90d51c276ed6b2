use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::mesh::MeshGeometry;
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Per-component scale of the edge-attribute rescale for one level.
///
/// An edge difference `d = coord(j) − coord(i)` maps to `d / (2·scale) + 0.5`,
/// so both traversal directions land in `[0, 1]` and the reverse direction is
/// `1 − attr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeNorm {
    pub scale: [f64; 3],
}

impl EdgeNorm {
    pub fn fit(coords: &[[f64; 3]], edges: &[(usize, usize)]) -> Self {
        let mut scale = [0.0f64; 3];
        for &(i, j) in edges {
            for c in 0..3 {
                scale[c] = scale[c].max((coords[j][c] - coords[i][c]).abs());
            }
        }
        Self { scale }
    }

    pub fn apply(&self, diff: [f64; 3]) -> [f64; 3] {
        let mut out = [0.5; 3];
        for c in 0..3 {
            if self.scale[c] > 0.0 {
                out[c] = diff[c] / (2.0 * self.scale[c]) + 0.5;
            }
        }
        out
    }
}

/// One resolution of the cardiac graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphLevel {
    pub node_count: usize,
    /// Undirected edges stored once with `i < j`.
    pub edges: Vec<(usize, usize)>,
    /// Rescaled `coord(j) − coord(i)` for each stored edge.
    pub edge_attr: Vec<[f64; 3]>,
    pub node_coords: Vec<[f64; 3]>,
    pub norm: EdgeNorm,
}

impl GraphLevel {
    /// Assembles a level from coordinates and an undirected edge set,
    /// fitting the edge-attribute normalization on this level.
    pub fn from_edges(node_coords: Vec<[f64; 3]>, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let edges: Vec<(usize, usize)> = edges
            .into_iter()
            .filter(|(i, j)| i != j)
            .map(|(i, j)| (i.min(j), i.max(j)))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let norm = EdgeNorm::fit(&node_coords, &edges);
        let edge_attr = edges
            .iter()
            .map(|&(i, j)| norm.apply(sub(node_coords[j], node_coords[i])))
            .collect();
        Self { node_count: node_coords.len(), edges, edge_attr, node_coords, norm }
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn max_degree(&self) -> usize {
        self.degrees().into_iter().max().unwrap_or(0)
    }

    /// Directed view: `(target, source, attr)` for both traversal directions.
    pub fn directed_edges(&self) -> Vec<(usize, usize, [f64; 3])> {
        let mut out = Vec::with_capacity(2 * self.edges.len());
        for (&(i, j), a) in self.edges.iter().zip(&self.edge_attr) {
            // message j → i carries coord(j) − coord(i)
            out.push((i, j, *a));
            out.push((j, i, [1.0 - a[0], 1.0 - a[1], 1.0 - a[2]]));
        }
        out
    }

    /// Graph Laplacian `L u = Σ_j (u_j − u_i)` with unit edge weights.
    pub fn laplacian(&self) -> CsrMatrix {
        let mut triplets = Vec::with_capacity(4 * self.edges.len());
        for &(i, j) in &self.edges {
            triplets.push((i, j, 1.0));
            triplets.push((j, i, 1.0));
            triplets.push((i, i, -1.0));
            triplets.push((j, j, -1.0));
        }
        CsrMatrix::from_triplets(self.node_count, self.node_count, &triplets)
    }

    /// Symmetrically normalized adjacency with self loops, `D^-1/2 (A + I) D^-1/2`.
    pub fn normalized_adjacency(&self) -> CsrMatrix {
        let deg: Vec<f64> = self.degrees().iter().map(|&d| d as f64 + 1.0).collect();
        let mut triplets = Vec::with_capacity(2 * self.edges.len() + self.node_count);
        for (i, d) in deg.iter().enumerate() {
            triplets.push((i, i, 1.0 / d));
        }
        for &(i, j) in &self.edges {
            let w = 1.0 / (deg[i] * deg[j]).sqrt();
            triplets.push((i, j, w));
            triplets.push((j, i, w));
        }
        CsrMatrix::from_triplets(self.node_count, self.node_count, &triplets)
    }

    /// Hop distances from a set of source nodes (`usize::MAX` when unreachable).
    pub fn hop_distances(&self, sources: &[usize]) -> Vec<usize> {
        let adj = self.neighbors();
        let mut dist = vec![usize::MAX; self.node_count];
        let mut queue = std::collections::VecDeque::new();
        for &s in sources {
            dist[s] = 0;
            queue.push_back(s);
        }
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Edge-length weighted shortest-path distances (mm) from a source node.
    pub fn geodesic_distances(&self, source: usize) -> Vec<f64> {
        use std::cmp::Reverse;
        use std::collections::BinaryHeap;
        let adj = self.neighbors();
        let mut dist = vec![f64::INFINITY; self.node_count];
        dist[source] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(Reverse((ordered(0.0), source)));
        while let Some(Reverse((d, u))) = heap.pop() {
            let d = f64::from_bits(d);
            if d > dist[u] {
                continue;
            }
            for &v in &adj[u] {
                let nd = d + norm3(sub(self.node_coords[v], self.node_coords[u]));
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Reverse((ordered(nd), v)));
                }
            }
        }
        dist
    }

    /// Returns a copy with node ids relabelled: new id of old node `i` is `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut coords = vec![[0.0; 3]; self.node_count];
        for (old, &new) in perm.iter().enumerate() {
            coords[new] = self.node_coords[old];
        }
        Self::from_edges(coords, self.edges.iter().map(|&(i, j)| (perm[i], perm[j])))
    }
}

// Non-negative finite floats order like their bit patterns.
fn ordered(x: f64) -> u64 {
    debug_assert!(x >= 0.0);
    x.to_bits()
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Converts a triangle mesh into its undirected edge graph.
pub fn build_graph(mesh: &MeshGeometry) -> Result<GraphLevel> {
    if mesh.vertices.is_empty() || mesh.faces.is_empty() {
        return Err(Error::EmptyGeometry);
    }
    mesh.validate()?;
    let edges = mesh
        .faces
        .iter()
        .flat_map(|&[a, b, c]| [(a, b), (b, c), (c, a)]);
    Ok(GraphLevel::from_edges(mesh.vertices.clone(), edges))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_has_three_edges() {
        let mesh = MeshGeometry::new(
            "tri",
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
        );
        let g = build_graph(&mesh).unwrap();
        assert_eq!(g.edges.len(), 3);
        assert_eq!(g.edge_attr.len(), 3);
    }

    #[test]
    fn unit_segment_attr() {
        let g = GraphLevel::from_edges(vec![[0.0; 3], [1.0, 0.0, 0.0]], [(0, 1)]);
        assert_eq!(g.edge_attr[0], [1.0, 0.5, 0.5]);
        let rev = g.directed_edges();
        assert_eq!(rev[1].2, [0.0, 0.5, 0.5]);
    }

    #[test]
    fn empty_mesh_is_rejected() {
        let mesh = MeshGeometry::new("e", vec![], vec![]);
        assert!(matches!(build_graph(&mesh), Err(Error::EmptyGeometry)));
    }

    #[test]
    fn degenerate_face_is_named() {
        let mesh = MeshGeometry::new(
            "d",
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]],
            vec![[0, 1, 2], [1, 3, 3]],
        );
        let err = build_graph(&mesh).unwrap_err();
        assert!(err.to_string().contains("degenerate face 1"), "{err}");
    }

    #[test]
    fn laplacian_annihilates_constants() {
        let g = build_graph(&MeshGeometry::grid(4, 3, 1.0)).unwrap();
        let l = g.laplacian();
        let mut out = vec![0.0; g.node_count];
        l.mul_vec(&vec![0.5; g.node_count], &mut out);
        assert!(out.iter().all(|&v| v == 0.0));
    }
}
