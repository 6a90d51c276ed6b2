use std::collections::HashSet;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::simulate::SimulationRecord;
use crate::error::{Error, Result};
use crate::geometry::GraphLevel;
use crate::seed;

/// Sparse sensor recording `y` (frames × sensors) of a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: Array2<f64>,
    pub sensor_nodes: Vec<usize>,
    pub noise_std: f64,
}

impl Observation {
    /// Every node observed without noise.
    pub fn full(record: &SimulationRecord) -> Self {
        Self { y: record.x.clone(), sensor_nodes: (0..record.nodes()).collect(), noise_std: 0.0 }
    }

    pub fn frames(&self) -> usize {
        self.y.nrows()
    }
}

/// Samples the record at `sensor_nodes` and adds `N(0, noise_std²)` noise.
pub fn observe(record: &SimulationRecord, sensor_nodes: &[usize], noise_std: f64, seed: u64) -> Result<Observation> {
    let n = record.nodes();
    let mut seen = HashSet::new();
    for &s in sensor_nodes {
        if s >= n {
            return Err(Error::shape(format!("sensor node {s} outside mesh of {n} nodes")));
        }
        if !seen.insert(s) {
            return Err(Error::DuplicateSensor(s));
        }
    }
    if !(noise_std >= 0.0) {
        return Err(Error::shape(format!("noise_std {noise_std} must be ≥ 0")));
    }
    let mut y = Array2::from_shape_fn((record.frames(), sensor_nodes.len()), |(t, m)| {
        record.x[[t, sensor_nodes[m]]]
    });
    if noise_std > 0.0 {
        let mut rng = seed::rng(seed);
        let normal = Normal::new(0.0, noise_std).expect("finite std");
        y.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    Ok(Observation { y, sensor_nodes: sensor_nodes.to_vec(), noise_std })
}

/// `count` spread-out sensor nodes by farthest-point sampling, starting at the
/// node nearest the centroid. Returned sorted.
pub fn sensor_layout(level: &GraphLevel, count: usize) -> Vec<usize> {
    let n = level.node_count;
    let count = count.min(n);
    if count == 0 {
        return Vec::new();
    }
    let coords = &level.node_coords;
    let mut centroid = [0.0; 3];
    for c in coords {
        for k in 0..3 {
            centroid[k] += c[k] / n as f64;
        }
    }
    let d2 = |a: [f64; 3], b: [f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
    let first = (0..n)
        .min_by(|&a, &b| d2(coords[a], centroid).total_cmp(&d2(coords[b], centroid)))
        .expect("nonempty");
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = coords.iter().map(|&c| d2(c, coords[first])).collect();
    while chosen.len() < count {
        let next = (0..n)
            .max_by(|&a, &b| nearest[a].total_cmp(&nearest[b]).then(b.cmp(&a)))
            .expect("nonempty");
        chosen.push(next);
        for i in 0..n {
            nearest[i] = nearest[i].min(d2(coords[i], coords[next]));
        }
    }
    chosen.sort_unstable();
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epsim::Stimulus;

    fn record() -> SimulationRecord {
        SimulationRecord {
            x: Array2::from_shape_fn((200, 60), |(t, i)| ((t * 7 + i * 3) % 11) as f64 / 10.0),
            dt: 1.0,
            stimulus: Stimulus { origins: vec![0], onset: 0.0, duration: 1.0, amplitude: 1.0 },
            tissue_id: "s".into(),
            mesh_id: "m".into(),
        }
    }

    #[test]
    fn noiseless_observation_is_a_column_subsample() {
        let r = record();
        let obs = observe(&r, &[3, 10, 59], 0.0, 1).unwrap();
        for t in 0..r.frames() {
            assert_eq!(obs.y[[t, 1]], r.x[[t, 10]]);
        }
        let all: Vec<usize> = (0..60).collect();
        assert_eq!(observe(&r, &all, 0.0, 1).unwrap().y, r.x);
    }

    #[test]
    fn noise_has_the_requested_spread() {
        let r = record();
        let all: Vec<usize> = (0..60).collect();
        let obs = observe(&r, &all, 0.01, 42).unwrap();
        assert_eq!(observe(&r, &all, 0.01, 42).unwrap(), obs);
        let resid: Vec<f64> = (&obs.y - &r.x).iter().copied().collect();
        assert!(resid.len() >= 10_000);
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let std = (resid.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (resid.len() - 1) as f64).sqrt();
        assert!((std - 0.01).abs() < 0.002, "std {std}");
    }

    #[test]
    fn duplicate_sensors_are_rejected() {
        assert!(matches!(observe(&record(), &[1, 2, 1], 0.0, 0), Err(Error::DuplicateSensor(1))));
    }

    #[test]
    fn layout_is_distinct_and_sized() {
        let g = crate::geometry::build_graph(&crate::geometry::MeshGeometry::grid(10, 10, 1.0)).unwrap();
        let s = sensor_layout(&g, 25);
        assert_eq!(s.len(), 25);
        let mut d = s.clone();
        d.dedup();
        assert_eq!(d.len(), 25);
    }
}
