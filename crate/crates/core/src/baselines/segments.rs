use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GraphHierarchy;
use crate::seed;

const ATTEMPTS: u64 = 10;
const MAX_ITERATIONS: usize = 200;

/// Assignment of every finest-level node to one of `count` nonempty segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPartition {
    pub segment: Vec<usize>,
    pub count: usize,
}

impl SegmentPartition {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &s in &self.segment {
            sizes[s] += 1;
        }
        sizes
    }

    /// Per-node values from per-segment values.
    pub fn expand(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.count {
            return Err(Error::shape(format!("{} segment values for {} segments", theta.len(), self.count)));
        }
        Ok(self.segment.iter().map(|&s| theta[s]).collect())
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

fn nearest(p: &[f64; 3], centers: &[[f64; 3]]) -> usize {
    let mut best = 0;
    for (c, center) in centers.iter().enumerate().skip(1) {
        if dist2(p, center) < dist2(p, &centers[best]) {
            best = c;
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations. `None` if a cluster empties.
fn lloyd(points: &[[f64; 3]], k: usize, rng: &mut impl Rng) -> Option<Vec<usize>> {
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    while centers.len() < k {
        let d: Vec<f64> = points.iter().map(|p| centers.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d.iter().sum();
        if total == 0.0 {
            return None;
        }
        let mut r = rng.random_range(0.0..total);
        let mut pick = d.iter().rposition(|&x| x > 0.0)?;
        for (i, &di) in d.iter().enumerate() {
            if r < di {
                pick = i;
                break;
            }
            r -= di;
        }
        centers.push(points[pick]);
    }
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..MAX_ITERATIONS {
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for d in 0..3 {
                sums[a][d] += p[d];
            }
        }
        if counts.contains(&0) {
            return None;
        }
        for c in 0..k {
            centers[c] = sums[c].map(|s| s / counts[c] as f64);
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    let mut seen = vec![false; k];
    assign.iter().for_each(|&a| seen[a] = true);
    seen.iter().all(|&s| s).then_some(assign)
}

/// `count` spatial clusters of `points`; retried with fresh seeds when a cluster empties.
pub fn kmeans_partition(points: &[[f64; 3]], count: usize, seed: u64) -> Result<SegmentPartition> {
    if count == 0 || count > points.len() {
        return Err(Error::Partition(format!("{count} segments for {} nodes", points.len())));
    }
    for attempt in 0..ATTEMPTS {
        let mut rng = seed::rng(seed::derive_index(seed, attempt));
        if let Some(segment) = lloyd(points, count, &mut rng) {
            return Ok(SegmentPartition { segment, count });
        }
    }
    Err(Error::Partition(format!("a segment stayed empty after {ATTEMPTS} attempts")))
}

/// Coordinate clustering of the finest level into `count` segments.
pub fn segment_partition(hier: &GraphHierarchy, count: usize, seed: u64) -> Result<SegmentPartition> {
    kmeans_partition(&hier.finest().node_coords, count, seed)
}
