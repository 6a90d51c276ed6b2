use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::{ap_rhs_into, ApParams, TissueField};
use crate::error::{Error, Result};
use crate::geometry::GraphHierarchy;

/// Largest admissible `dt · D · max_degree` for forward Euler on the graph
/// Laplacian (its spectrum lies in `[−2·max_degree, 0]`).
pub const STABILITY_LIMIT: f64 = 1.0;

/// Allowed range of recorded potentials around the action-potential range `[0, 1]`.
pub const U_MIN: f64 = -0.05;
pub const U_MAX: f64 = 1.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stimulus {
    pub origins: Vec<usize>,
    pub onset: f64,
    pub duration: f64,
    pub amplitude: f64,
}

impl Stimulus {
    pub fn validate(&self, nodes: usize) -> Result<()> {
        if self.origins.is_empty() {
            return Err(Error::Stimulus("empty origin set".into()));
        }
        if let Some(&o) = self.origins.iter().find(|&&o| o >= nodes) {
            return Err(Error::Stimulus(format!("origin {o} outside mesh of {nodes} nodes")));
        }
        if !(self.onset >= 0.0) || !(self.duration > 0.0) {
            return Err(Error::Stimulus(format!(
                "onset {} must be ≥ 0 and duration {} > 0",
                self.onset, self.duration
            )));
        }
        Ok(())
    }

    pub fn is_active(&self, t: f64) -> bool {
        t >= self.onset && t < self.onset + self.duration
    }
}

/// Integration settings: `frames` recorded frames, each `substeps` Euler steps of `dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    #[serde(default)]
    pub ap: ApParams,
    pub dt: f64,
    pub substeps: usize,
    pub frames: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        Self { ap: ApParams::default(), dt: 0.1, substeps: 30, frames: 40 }
    }
}

impl SimParams {
    pub fn frame_interval(&self) -> f64 {
        self.dt * self.substeps as f64
    }

    pub fn total_steps(&self) -> usize {
        self.frames * self.substeps
    }
}

/// Transmembrane potential `x` (frames × nodes) of one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub x: Array2<f64>,
    /// Time between recorded frames.
    pub dt: f64,
    pub stimulus: Stimulus,
    pub tissue_id: String,
    pub mesh_id: String,
}

impl SimulationRecord {
    pub fn frames(&self) -> usize {
        self.x.nrows()
    }

    pub fn nodes(&self) -> usize {
        self.x.ncols()
    }
}

/// Explicit forward-Euler integration on the finest level of `hier`.
///
/// Potentials leaving `[U_MIN, U_MAX]` abort with [`Error::Unstable`]; nothing is clamped.
pub fn simulate(
    hier: &GraphHierarchy,
    tissue: &TissueField,
    stim: &Stimulus,
    params: &SimParams,
    tissue_id: &str,
) -> Result<SimulationRecord> {
    let level = hier.finest();
    let n = level.node_count;
    if tissue.len() != n {
        return Err(Error::shape(format!("tissue has {} nodes, mesh {n}", tissue.len())));
    }
    stim.validate(n)?;
    if params.frames < 2 || params.substeps == 0 {
        return Err(Error::Stimulus(format!(
            "need ≥2 frames and ≥1 substep, got {} × {}",
            params.frames, params.substeps
        )));
    }
    let stability = params.dt * params.ap.diffusion * level.max_degree() as f64;
    if !(params.dt > 0.0) || stability > STABILITY_LIMIT {
        return Err(Error::TimeStep(stability));
    }

    let laplacian = level.laplacian();
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut du = vec![0.0; n];
    let mut dv = vec![0.0; n];
    let mut i_stim = vec![0.0; n];
    let mut x = Array2::zeros((params.frames, n));
    let mut step = 0usize;
    for frame in 0..params.frames {
        for _ in 0..params.substeps {
            let t = step as f64 * params.dt;
            let active = stim.is_active(t);
            for &o in &stim.origins {
                i_stim[o] = if active { stim.amplitude } else { 0.0 };
            }
            ap_rhs_into(&u, &v, &tissue.excitability, &laplacian, &i_stim, &params.ap, &mut du, &mut dv);
            for i in 0..n {
                u[i] += params.dt * du[i];
                v[i] += params.dt * dv[i];
            }
            step += 1;
            if let Some(node) = u.iter().position(|&ui| !(U_MIN..=U_MAX).contains(&ui)) {
                return Err(Error::Unstable { step, node, value: u[node] });
            }
        }
        x.row_mut(frame).assign(&ndarray::ArrayView1::from(&u));
    }
    Ok(SimulationRecord {
        x,
        dt: params.frame_interval(),
        stimulus: stim.clone(),
        tissue_id: tissue_id.to_string(),
        mesh_id: hier.mesh_id.clone(),
    })
}

/// First frame at which each node exceeds `threshold`, `None` if it never does.
pub fn activation_frames(x: &Array2<f64>, threshold: f64) -> Vec<Option<usize>> {
    (0..x.ncols())
        .map(|i| x.column(i).iter().position(|&u| u > threshold))
        .collect()
}

/// The stimulus site of `origin`: the node together with its graph neighbours.
pub fn stimulus_at(hier: &GraphHierarchy, origin: usize, onset: f64, duration: f64, amplitude: f64) -> Stimulus {
    let mut origins = vec![origin];
    origins.extend(hier.finest().neighbors()[origin].iter().copied());
    origins.sort_unstable();
    Stimulus { origins, onset, duration, amplitude }
}
