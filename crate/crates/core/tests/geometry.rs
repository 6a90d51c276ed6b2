use std::collections::BTreeSet;

use proptest::prelude::*;

use pns::geometry::*;

/// Unique undirected edges of a face list, enumerated independently of `build_graph`.
fn brute_edges(faces: &[[usize; 3]]) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for f in faces {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[0], f[2])] {
            out.insert((a.min(b), a.max(b)));
        }
    }
    out
}

#[test]
fn grid_edges_match_brute_force_enumeration() {
    let mesh = MeshGeometry::grid(10, 10, 1.0);
    let g = build_graph(&mesh).unwrap();
    let oracle = brute_edges(&mesh.faces);
    let got: BTreeSet<_> = g.edges.iter().copied().collect();
    assert_eq!(got.len(), g.edges.len(), "duplicate edges");
    assert_eq!(got, oracle);
    // 2·10·9 axis-aligned edges plus one diagonal per cell.
    assert_eq!(g.edges.len(), 2 * 10 * 9 + 81);
    assert_eq!(g.edge_attr.len(), g.edges.len());
    assert!(g.edge_attr.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn sphere_hierarchy_holds_its_invariants() {
    let mesh = MeshGeometry::icosphere(2, 10.0);
    let hier = build_hierarchy(&mesh, 4, 0.5, 3).unwrap();
    hier.check_invariants().unwrap();
    let counts = hier.node_counts();
    assert_eq!(counts[0], 162);
    for w in counts.windows(2) {
        assert!(w[1] < w[0]);
        let target = (0.5 * w[0] as f64).ceil() as isize;
        assert!((w[1] as isize - target).abs() <= 1, "{counts:?}");
    }
}

#[test]
fn ten_by_ten_halves_twice() {
    let hier = build_hierarchy(&MeshGeometry::grid(10, 10, 1.0), 3, 0.5, 0).unwrap();
    let counts = hier.node_counts();
    for (got, want) in counts.iter().zip([100isize, 50, 25]) {
        assert!((*got as isize - want).abs() <= 1, "{counts:?}");
    }
}

/// Checks the coarse level of `coarsen` against centroid and contraction oracles.
fn check_coarse_level(fine: &GraphLevel, coarse: &GraphLevel, assign: &[usize]) {
    assert_eq!(assign.len(), fine.node_count);
    let mut members = vec![Vec::new(); coarse.node_count];
    for (i, &c) in assign.iter().enumerate() {
        members[c].push(i);
    }
    assert!(members.iter().all(|m| !m.is_empty()), "assignment not surjective");
    for (c, m) in members.iter().enumerate() {
        for d in 0..3 {
            let centroid = m.iter().map(|&i| fine.node_coords[i][d]).sum::<f64>() / m.len() as f64;
            assert!((coarse.node_coords[c][d] - centroid).abs() < 1e-12);
        }
    }
    let contracted: BTreeSet<(usize, usize)> = fine
        .edges
        .iter()
        .map(|&(i, j)| (assign[i], assign[j]))
        .filter(|(a, b)| a != b)
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    let got: BTreeSet<_> = coarse.edges.iter().copied().collect();
    assert_eq!(got, contracted);
    let norm = EdgeNorm::fit(&coarse.node_coords, &coarse.edges);
    for (&(i, j), attr) in coarse.edges.iter().zip(&coarse.edge_attr) {
        let diff: [f64; 3] = std::array::from_fn(|d| coarse.node_coords[j][d] - coarse.node_coords[i][d]);
        assert_eq!(*attr, norm.apply(diff));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn coarsening_meets_its_contract(nx in 2usize..9, ny in 2usize..9, ratio in 0.3f64..0.8, seed in 0u64..1000) {
        prop_assume!(nx * ny >= 4 && (ratio * (nx * ny) as f64).ceil() >= 2.0);
        let fine = build_graph(&MeshGeometry::grid(nx, ny, 1.5)).unwrap();
        let (coarse, assign) = coarsen(&fine, ratio, seed).unwrap();
        let target = (ratio * fine.node_count as f64).ceil() as isize;
        prop_assert!((coarse.node_count as isize - target).abs() <= 1);
        check_coarse_level(&fine, &coarse, &assign);
        prop_assert_eq!(coarsen(&fine, ratio, seed).unwrap().1, assign);
    }

    #[test]
    fn edge_attributes_ignore_translation(dx in -50.0f64..50.0, dy in -50.0f64..50.0, dz in -50.0f64..50.0) {
        let mesh = MeshGeometry::icosphere(1, 3.0);
        let mut moved = mesh.clone();
        for v in &mut moved.vertices {
            *v = [v[0] + dx, v[1] + dy, v[2] + dz];
        }
        let (a, b) = (build_graph(&mesh).unwrap(), build_graph(&moved).unwrap());
        prop_assert_eq!(&a.edges, &b.edges);
        for (p, q) in a.edge_attr.iter().zip(&b.edge_attr) {
            for d in 0..3 {
                prop_assert!((p[d] - q[d]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn unpool_then_pool_restores_coarse_signals(values in prop::collection::vec(-5.0f64..5.0, 64)) {
        let hier = build_hierarchy(&MeshGeometry::grid(8, 8, 1.0), 4, 0.5, 1).unwrap();
        for l in 0..hier.num_levels() - 1 {
            let coarse = &values[..hier.levels[l + 1].node_count];
            let fine = hier.unpool(l, coarse);
            let back = hier.pool(l, &fine);
            for (x, y) in back.iter().zip(coarse) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            // Pool then unpool is idempotent.
            let once = hier.unpool(l, &hier.pool(l, &values[..hier.levels[l].node_count]));
            let twice = hier.unpool(l, &hier.pool(l, &once));
            for (x, y) in once.iter().zip(&twice) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn hierarchy_survives_serialization() {
    let hier = build_hierarchy(&MeshGeometry::grid(6, 5, 1.0), 3, 0.5, 0).unwrap();
    let back: GraphHierarchy = serde_json::from_str(&serde_json::to_string(&hier).unwrap()).unwrap();
    assert_eq!(back, hier);
}
