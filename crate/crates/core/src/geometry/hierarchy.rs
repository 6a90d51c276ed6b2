use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{build_graph, GraphLevel};
use super::mesh::MeshGeometry;
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

pub const DEFAULT_LEVELS: usize = 4;
pub const DEFAULT_RATIO: f64 = 0.5;

/// Finest-to-coarsest graph levels with the fine → coarse node maps between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphHierarchy {
    pub mesh_id: String,
    pub levels: Vec<GraphLevel>,
    /// `assign[l][i]` is the node of level `l + 1` that fine node `i` of level `l` merges into.
    pub assign: Vec<Vec<usize>>,
}

impl GraphHierarchy {
    pub fn finest(&self) -> &GraphLevel {
        &self.levels[0]
    }

    pub fn coarsest(&self) -> &GraphLevel {
        self.levels.last().expect("hierarchy has levels")
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn node_counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.node_count).collect()
    }

    /// Preimage-mean pooling from level `l` to `l + 1` (rows = coarse nodes).
    pub fn pool_matrix(&self, l: usize) -> CsrMatrix {
        let assign = &self.assign[l];
        let coarse = self.levels[l + 1].node_count;
        let mut sizes = vec![0usize; coarse];
        for &c in assign {
            sizes[c] += 1;
        }
        let triplets: Vec<_> =
            assign.iter().enumerate().map(|(i, &c)| (c, i, 1.0 / sizes[c] as f64)).collect();
        CsrMatrix::from_triplets(coarse, assign.len(), &triplets)
    }

    /// Copy-to-preimage unpooling from level `l + 1` to `l` (rows = fine nodes).
    pub fn unpool_matrix(&self, l: usize) -> CsrMatrix {
        let assign = &self.assign[l];
        let coarse = self.levels[l + 1].node_count;
        let triplets: Vec<_> = assign.iter().enumerate().map(|(i, &c)| (i, c, 1.0)).collect();
        CsrMatrix::from_triplets(assign.len(), coarse, &triplets)
    }

    pub fn pool(&self, l: usize, signal: &[f64]) -> Vec<f64> {
        let m = self.pool_matrix(l);
        let mut out = vec![0.0; m.rows];
        m.mul_vec(signal, &mut out);
        out
    }

    pub fn unpool(&self, l: usize, signal: &[f64]) -> Vec<f64> {
        self.assign[l].iter().map(|&c| signal[c]).collect()
    }

    /// Relabels the finest level by `perm` (new id of old node `i` is `perm[i]`)
    /// and carries the relabelling through the first assignment map.
    pub fn permute_finest(&self, perm: &[usize]) -> Self {
        let mut levels = self.levels.clone();
        levels[0] = self.levels[0].permuted(perm);
        let mut assign = self.assign.clone();
        if let Some(first) = assign.first_mut() {
            let mut relabelled = vec![0; first.len()];
            for (old, &c) in self.assign[0].iter().enumerate() {
                relabelled[perm[old]] = c;
            }
            *first = relabelled;
        }
        Self { mesh_id: self.mesh_id.clone(), levels, assign }
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.levels.len() != self.assign.len() + 1 {
            return Err(Error::Coarsen("assign maps do not match level count".into()));
        }
        for (l, map) in self.assign.iter().enumerate() {
            let (fine, coarse) = (self.levels[l].node_count, self.levels[l + 1].node_count);
            if coarse >= fine || map.len() != fine {
                return Err(Error::Coarsen(format!("level {l}: {fine} → {coarse} nodes")));
            }
            let hit: BTreeSet<_> = map.iter().copied().collect();
            if hit.len() != coarse || hit.iter().any(|&c| c >= coarse) {
                return Err(Error::Coarsen(format!("level {l}: assignment not surjective")));
            }
        }
        Ok(())
    }
}

/// Greedy heaviest-edge matching (normalized-cut weights `1/deg(u) + 1/deg(v)`),
/// clusters of at most two per pass, repeated until the coarse node count
/// reaches `ceil(target_ratio · n)`.
///
/// Returns the coarse level and the fine → coarse assignment.
pub fn coarsen(level: &GraphLevel, target_ratio: f64, seed: u64) -> Result<(GraphLevel, Vec<usize>)> {
    if !(target_ratio > 0.0 && target_ratio < 1.0) {
        return Err(Error::Coarsen(format!("ratio {target_ratio} outside (0, 1)")));
    }
    let n = level.node_count;
    if n < 4 {
        return Err(Error::Coarsen(format!("need ≥4 nodes to coarsen, got {n}")));
    }
    let target = (target_ratio * n as f64).ceil() as usize;
    if target < 2 {
        return Err(Error::Coarsen(format!("ratio {target_ratio} leaves {target} coarse node(s)")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assign: Vec<usize> = (0..n).collect();
    let mut count = n;
    let mut edges: BTreeSet<(usize, usize)> = level.edges.iter().copied().collect();

    while count > target {
        let mut adj = vec![Vec::new(); count];
        for &(i, j) in &edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        let deg: Vec<f64> = adj.iter().map(|a| a.len() as f64).collect();
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng);

        let mut mate: Vec<Option<usize>> = vec![None; count];
        let mut remaining = count;
        for &u in &order {
            if remaining == target {
                break;
            }
            if mate[u].is_some() {
                continue;
            }
            let mut best: Option<(f64, usize)> = None;
            for &v in &adj[u] {
                if mate[v].is_some() {
                    continue;
                }
                let w = 1.0 / deg[u] + 1.0 / deg[v];
                let better = match best {
                    None => true,
                    Some((bw, bv)) => w > bw || (w == bw && v < bv),
                };
                if better {
                    best = Some((w, v));
                }
            }
            if let Some((_, v)) = best {
                mate[u] = Some(v);
                mate[v] = Some(u);
                remaining -= 1;
            }
        }
        if remaining == count {
            return Err(Error::Coarsen(format!(
                "cannot contract below {count} nodes (target {target}); graph has isolated parts"
            )));
        }

        // number clusters by their smallest member
        let mut relabel = vec![usize::MAX; count];
        let mut next = 0;
        for u in 0..count {
            if relabel[u] != usize::MAX {
                continue;
            }
            relabel[u] = next;
            if let Some(v) = mate[u] {
                relabel[v] = next;
            }
            next += 1;
        }
        debug_assert_eq!(next, remaining);
        for a in assign.iter_mut() {
            *a = relabel[*a];
        }
        edges = edges
            .iter()
            .map(|&(i, j)| (relabel[i], relabel[j]))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| (i.min(j), i.max(j)))
            .collect();
        count = remaining;
    }

    let mut sums = vec![[0.0f64; 3]; count];
    let mut sizes = vec![0usize; count];
    for (i, &c) in assign.iter().enumerate() {
        for k in 0..3 {
            sums[c][k] += level.node_coords[i][k];
        }
        sizes[c] += 1;
    }
    let coords: Vec<[f64; 3]> = sums
        .iter()
        .zip(&sizes)
        .map(|(s, &m)| [s[0] / m as f64, s[1] / m as f64, s[2] / m as f64])
        .collect();
    let coarse_edges = level.edges.iter().map(|&(i, j)| (assign[i], assign[j]));
    Ok((GraphLevel::from_edges(coords, coarse_edges), assign))
}

/// Builds `num_levels` levels by repeated coarsening of the mesh graph.
pub fn build_hierarchy(mesh: &MeshGeometry, num_levels: usize, ratio: f64, seed: u64) -> Result<GraphHierarchy> {
    if num_levels < 2 {
        return Err(Error::TooFewLevels(num_levels));
    }
    let mut levels = vec![build_graph(mesh)?];
    let mut assign = Vec::new();
    for l in 1..num_levels {
        let (coarse, map) = coarsen(&levels[l - 1], ratio, seed.wrapping_add(l as u64))?;
        levels.push(coarse);
        assign.push(map);
    }
    let h = GraphHierarchy { mesh_id: mesh.name.clone(), levels, assign };
    h.check_invariants()?;
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> GraphLevel {
        GraphLevel::from_edges((0..n).map(|i| [i as f64, 0.0, 0.0]).collect(), (1..n).map(|i| (i - 1, i)))
    }

    #[test]
    fn path_of_four_halves_into_pairs() {
        for seed in 0..20 {
            let (coarse, assign) = coarsen(&path(4), 0.5, seed).unwrap();
            assert_eq!(coarse.node_count, 2);
            assert_eq!(coarse.edges, vec![(0, 1)]);
            assert_eq!(assign, vec![0, 0, 1, 1], "seed {seed}");
            assert_eq!(coarse.node_coords, vec![[0.5, 0.0, 0.0], [2.5, 0.0, 0.0]]);
        }
    }

    #[test]
    fn ratio_near_one_is_bijective() {
        let g = build_graph(&MeshGeometry::grid(10, 10, 1.0)).unwrap();
        let (coarse, assign) = coarsen(&g, 0.999, 3).unwrap();
        assert_eq!(coarse.node_count, 100);
        let mut seen = assign.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_ratios() {
        let g = path(6);
        assert!(coarsen(&g, 0.1, 0).is_err());
        assert!(coarsen(&g, 1.0, 0).is_err());
        assert!(coarsen(&path(3), 0.5, 0).is_err());
    }

    #[test]
    fn grid_hierarchy_counts() {
        let mesh = MeshGeometry::grid(10, 10, 1.0);
        let h = build_hierarchy(&mesh, 3, 0.5, 0).unwrap();
        let counts = h.node_counts();
        for (got, want) in counts.iter().zip([100usize, 50, 25]) {
            assert!(got.abs_diff(want) <= 1, "{counts:?}");
        }
        h.check_invariants().unwrap();
    }

    #[test]
    fn one_level_is_rejected() {
        let mesh = MeshGeometry::grid(4, 4, 1.0);
        let err = build_hierarchy(&mesh, 1, 0.5, 0).unwrap_err();
        assert!(err.to_string().contains("need ≥2 levels"));
    }

    #[test]
    fn coarsening_is_deterministic() {
        let g = build_graph(&MeshGeometry::icosphere(2, 1.0)).unwrap();
        assert_eq!(coarsen(&g, 0.5, 11).unwrap(), coarsen(&g, 0.5, 11).unwrap());
    }

    #[test]
    fn constant_signal_survives_pool_and_unpool() {
        let h = build_hierarchy(&MeshGeometry::grid(8, 7, 1.0), 4, 0.5, 1).unwrap();
        for l in 0..h.assign.len() {
            let fine = vec![2.5; h.levels[l].node_count];
            let coarse = h.pool(l, &fine);
            assert!(coarse.iter().all(|&v| (v - 2.5).abs() < 1e-15));
            assert_eq!(h.unpool(l, &coarse).len(), fine.len());
            let back = h.pool(l, &h.unpool(l, &coarse));
            assert!(back.iter().zip(&coarse).all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }
}
