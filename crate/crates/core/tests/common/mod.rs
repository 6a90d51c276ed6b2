#![allow(dead_code)]

use pns::epsim::{
    activation_frames, make_subject_bank, observe, sensor_layout, simulate, stimulus_at, ScarConfig, ScarRegion, SensorSpec,
    SimParams, Stimulus, StimulusSpec, SubjectBank, TissueField,
};
use pns::geometry::{build_hierarchy, GraphHierarchy, MeshGeometry};
use pns::metainfer::{loss, loss_and_grad, ContextSet, LossWeights};
use pns::model::{ArchConfig, Model};
use pns::nn::GraphOps;
use pns::training::{sample_episode, Episode};

/// Six-node sheet, two levels.
pub fn micro_hier() -> GraphHierarchy {
    build_hierarchy(&MeshGeometry::grid(3, 2, 1.0), 2, 0.5, 0).unwrap()
}

pub fn micro_arch() -> ArchConfig {
    ArchConfig {
        hidden: 2,
        latent_dim: 2,
        cond_dim: 2,
        kernel_size: 2,
        blocks: 4,
        gru_hidden: 2,
        time_hidden: 2,
        frames: 3,
        ..ArchConfig::default()
    }
}

pub fn micro_sim() -> SimParams {
    SimParams { frames: 3, substeps: 20, ..SimParams::default() }
}

/// Two subjects on the six-node sheet, one record per node, T = 3.
pub fn micro_bank(hier: &GraphHierarchy) -> SubjectBank {
    let subjects = [
        ScarConfig::healthy("healthy"),
        ScarConfig { name: "scar".into(), regions: vec![ScarRegion { center: 5, radius: 0.5, excitability: 0.5 }] },
    ];
    let sensors = SensorSpec { nodes: vec![0, 2, 4], noise_std: 0.0, seed: 0 };
    let stim = StimulusSpec { onset: 0.0, duration: 1.0, amplitude: 0.5 };
    make_subject_bank(hier, &subjects, &[0, 1, 2, 3, 4, 5], stim, &micro_sim(), &sensors).unwrap()
}

pub fn micro_model(seed: u64) -> (GraphHierarchy, Model, GraphOps) {
    let hier = micro_hier();
    let model = Model::new(&micro_arch(), &hier, seed).unwrap();
    let ops = model.graph_ops(&hier);
    (hier, model, ops)
}

/// 8×8 sheet with three levels and a small model.
pub fn small_model(seed: u64) -> (GraphHierarchy, Model, GraphOps) {
    let hier = build_hierarchy(&MeshGeometry::grid(8, 8, 1.0), 3, 0.5, 0).unwrap();
    let arch = ArchConfig { hidden: 4, latent_dim: 3, cond_dim: 3, frames: 6, ..ArchConfig::default() };
    let model = Model::new(&arch, &hier, seed).unwrap();
    let ops = model.graph_ops(&hier);
    (hier, model, ops)
}

/// A fixed micro episode: three context items, three targets.
pub fn micro_episode(bank: &SubjectBank) -> Episode {
    let mut rng = pns::seed::rng(4);
    loop {
        let ep = sample_episode(&bank.subjects[1], 6, 5, &mut rng).unwrap();
        if ep.context.len() == 3 {
            return ep;
        }
    }
}

/// Per-parameter relative error `‖g_fd − g‖ / max(‖g_fd‖, ‖g‖)` between the
/// analytic gradient and central differences of step `h`.
pub fn finite_difference_errors(model: &Model, ops: &GraphOps, ep: &Episode, w: LossWeights, seed: u64, h: f64) -> Vec<(String, f64)> {
    let (_, grads) = loss_and_grad(model, ops, ep, w, seed).unwrap();
    let mut probe = model.clone();
    let mut out = Vec::new();
    for id in model.params.ids() {
        let shape = model.params.get(id).dim();
        let mut fd = ndarray::Array2::<f64>::zeros(shape);
        for idx in ndarray::indices(shape) {
            let x0 = model.params.get(id)[idx];
            probe.params.get_mut(id)[idx] = x0 + h;
            let up = loss(&probe, ops, ep, w, seed).unwrap().total;
            probe.params.get_mut(id)[idx] = x0 - h;
            let down = loss(&probe, ops, ep, w, seed).unwrap().total;
            probe.params.get_mut(id)[idx] = x0;
            fd[idx] = (up - down) / (2.0 * h);
        }
        let an = grads.get(id);
        let norm = |a: &ndarray::Array2<f64>| a.mapv(|v| v * v).sum().sqrt();
        let scale = norm(&fd).max(norm(an));
        let rel = if scale == 0.0 { 0.0 } else { norm(&(&fd - an)) / scale };
        out.push((model.params.name(id).to_string(), rel));
    }
    out
}

/// The 14×14 sheet with four levels.
pub fn desk_hier() -> GraphHierarchy {
    build_hierarchy(&MeshGeometry::grid(14, 14, 1.0), 4, 0.5, 0).unwrap()
}

pub fn desk_bank(hier: &GraphHierarchy) -> SubjectBank {
    pns::epsim::DatasetSpec::desk().generate(hier, 0).unwrap()
}

/// Between-class variance of every candidate split, recomputed from scratch.
pub fn otsu_brute(values: &[f64]) -> (usize, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w = (max - min) / 256.0;
    let bin = |v: f64| (((v - min) / w) as usize).min(255);
    let center = |v: f64| min + (bin(v) as f64 + 0.5) * w;
    let mut best = (0, f64::NEG_INFINITY);
    for k in 0..255 {
        let lower: Vec<f64> = values.iter().filter(|&&v| bin(v) <= k).map(|&v| center(v)).collect();
        let upper: Vec<f64> = values.iter().filter(|&&v| bin(v) > k).map(|&v| center(v)).collect();
        let score = if lower.is_empty() || upper.is_empty() {
            0.0
        } else {
            let n = values.len() as f64;
            let m0 = lower.iter().sum::<f64>() / lower.len() as f64;
            let m1 = upper.iter().sum::<f64>() / upper.len() as f64;
            (lower.len() as f64 / n) * (upper.len() as f64 / n) * (m0 - m1).powi(2)
        };
        if score > best.1 {
            best = (k, score);
        }
    }
    let k = best.0;
    let last = (k..255).take_while(|&j| j == k || values.iter().all(|&v| bin(v) != j)).last().unwrap();
    (k, min + 0.5 * ((k + 1) as f64 + (last + 1) as f64) * w)
}

/// Frame interval 0.1 over the default 120-unit horizon, for activation timing.
pub fn fine_sim() -> SimParams {
    SimParams { substeps: 1, frames: 1200, ..SimParams::default() }
}

pub fn activation_times(hier: &GraphHierarchy, tissue: &TissueField, origin: usize) -> Vec<Option<f64>> {
    let sim = fine_sim();
    let rec = simulate(hier, tissue, &stimulus_at(hier, origin, 0.0, 1.0, 0.5), &sim, "t").unwrap();
    activation_frames(&rec.x, 0.5).into_iter().map(|f| f.map(|f| f as f64 * sim.frame_interval())).collect()
}

/// Non-scar nodes in the shadow of a scar: within two columns of its centre
/// and at least three rows past it, on the side away from the origin.
pub fn shadow(tissue: &TissueField, center: usize, origin: usize) -> Vec<usize> {
    let xy = |i: usize| ((i % 14) as i64, (i / 14) as i64);
    let ((cx, cy), (_, oy)) = (xy(center), xy(origin));
    (0..196)
        .filter(|&i| {
            let (x, y) = xy(i);
            !tissue.scar_mask[i] && (x - cx).abs() <= 2 && (y - cy) * (cy - oy).signum() >= 3
        })
        .collect()
}

/// Uniform excitability `a` on the desk sheet observed from three stimuli.
pub fn uniform_toy(hier: &GraphHierarchy, a: f64) -> (ContextSet, Vec<Stimulus>) {
    let tissue = TissueField::healthy(196, a);
    let sensors = sensor_layout(hier.finest(), 49);
    let mut items = Vec::new();
    let mut stimuli = Vec::new();
    for origin in [20, 97, 170] {
        let stim = stimulus_at(hier, origin, 0.0, 1.0, 0.5);
        let rec = simulate(hier, &tissue, &stim, &SimParams::default(), "toy").unwrap();
        items.push(observe(&rec, &sensors, 0.0, 0).unwrap());
        stimuli.push(stim);
    }
    (ContextSet::new("toy", items).unwrap(), stimuli)
}
