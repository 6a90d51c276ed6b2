use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::segments::SegmentPartition;
use crate::autodiff::Mat;
use crate::epsim::{observe, simulate, SimParams, SimulationRecord, Stimulus, TissueField};
use crate::error::{Error, Result};
use crate::eval::{mse, Item, Personalized, Personalizer};
use crate::geometry::GraphHierarchy;
use crate::metainfer::ContextSet;
use crate::seed;

/// Box `[lower, upper]` per segment, searched on a lattice of step `resolution`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
    pub resolution: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self { lower: 0.05, upper: 0.6, resolution: 0.01 }
    }
}

impl Bounds {
    fn steps(&self) -> Result<usize> {
        let span = (self.upper - self.lower) / self.resolution;
        if !(self.resolution > 0.0 && span >= 1.0 && span.is_finite()) {
            return Err(Error::Config(format!("bad bounds {self:?}")));
        }
        Ok(span.round() as usize)
    }

    fn value(&self, index: usize) -> f64 {
        self.lower + index as f64 * self.resolution
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoConfig {
    /// Objective evaluations, each one simulation per context stimulus.
    pub budget: usize,
    pub initial: usize,
    pub refit_every: usize,
    pub nugget: f64,
    /// Objective recorded for parameters at which the simulator is unstable.
    pub penalty: f64,
    /// Random lattice candidates per acquisition when the lattice is too large to enumerate.
    pub candidates: usize,
    pub bounds: Bounds,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            budget: 100,
            initial: 10,
            refit_every: 10,
            nugget: 1e-6,
            penalty: 1e3,
            candidates: 2000,
            bounds: Bounds::default(),
            seed: 0,
        }
    }
}

const FULL_LATTICE_LIMIT: usize = 5000;

/// Squared-exponential ARD kernel over the unit box with a constant mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub mean: f64,
    pub scale: f64,
    pub signal_var: f64,
    pub lengthscales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoState {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub unstable: Vec<bool>,
    pub hyper: Option<GpHyper>,
    pub budget: usize,
}

impl BoState {
    /// Index of the lowest objective; the earliest on ties.
    pub fn best(&self) -> Option<usize> {
        (0..self.values.len()).reduce(|b, i| if self.values[i] < self.values[b] { i } else { b })
    }
}

struct Gp {
    x: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    hyper: GpHyper,
    nugget: f64,
}

fn correlation(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    let r2: f64 = a.iter().zip(b).zip(ls).map(|((x, y), l)| ((x - y) / l).powi(2)).sum();
    (-0.5 * r2).exp()
}

fn correlation_matrix(x: &[Vec<f64>], ls: &[f64], nugget: f64) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| correlation(&x[i], &x[j], ls) + if i == j { nugget } else { 0.0 })
}

/// Profile log marginal likelihood with the signal variance at its optimum.
fn profile_likelihood(x: &[Vec<f64>], y: &DVector<f64>, ls: &[f64], nugget: f64) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    let chol = correlation_matrix(x, ls, nugget).cholesky()?;
    let alpha = chol.solve(y);
    let signal_var = (y.dot(&alpha) / n).max(1e-12);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    Some((-0.5 * (n * signal_var.ln() + log_det), signal_var))
}

impl Gp {
    fn standardized(values: &[f64], unstable: &[bool]) -> (Vec<f64>, f64, f64) {
        let cap = values.iter().zip(unstable).filter(|(_, u)| !**u).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
        let capped: Vec<f64> = values.iter().map(|&v| if cap.is_finite() { v.min(cap) } else { 0.0 }).collect();
        let n = capped.len() as f64;
        let mean = capped.iter().sum::<f64>() / n;
        let var = capped.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        (capped.iter().map(|v| (v - mean) / scale).collect(), mean, scale)
    }

    /// Coordinate ascent of the profile likelihood over a log grid of length-scales.
    fn fit_lengthscales(x: &[Vec<f64>], y: &DVector<f64>, start: &[f64], nugget: f64) -> Vec<f64> {
        let grid: Vec<f64> = (0..20).map(|i| (0.01f64.ln() + i as f64 * (3.0f64.ln() - 0.01f64.ln()) / 19.0).exp()).collect();
        let mut ls = start.to_vec();
        let mut best = profile_likelihood(x, y, &ls, nugget).map_or(f64::NEG_INFINITY, |p| p.0);
        for _ in 0..3 {
            for d in 0..ls.len() {
                for &g in &grid {
                    let mut trial = ls.clone();
                    trial[d] = g;
                    if let Some((ll, _)) = profile_likelihood(x, y, &trial, nugget) {
                        if ll > best {
                            best = ll;
                            ls = trial;
                        }
                    }
                }
            }
        }
        ls
    }

    fn new(x: Vec<Vec<f64>>, state: &BoState, lengthscales: Vec<f64>, nugget: f64) -> Result<Self> {
        let (ys, mean, scale) = Self::standardized(&state.values, &state.unstable);
        let y = DVector::from_vec(ys);
        let mut jitter = nugget;
        loop {
            if let Some((_, signal_var)) = profile_likelihood(&x, &y, &lengthscales, jitter) {
                let chol = correlation_matrix(&x, &lengthscales, jitter).cholesky().expect("factorized above");
                let alpha = chol.solve(&y);
                let hyper = GpHyper { mean, scale, signal_var, lengthscales };
                return Ok(Self { x, chol, alpha, hyper, nugget: jitter });
            }
            jitter *= 10.0;
            if jitter > 1e-2 {
                return Err(Error::NonFinite("Gaussian-process covariance".into()));
            }
        }
    }

    /// Posterior mean and standard deviation in standardized units.
    fn predict(&self, p: &[f64]) -> (f64, f64) {
        let ls = &self.hyper.lengthscales;
        let r = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| correlation(xi, p, ls)));
        let mu = r.dot(&self.alpha);
        let v = self.chol.solve(&r);
        let var = self.hyper.signal_var * (1.0 + self.nugget - r.dot(&v)).max(0.0);
        (mu, var.sqrt())
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Expected improvement below `best` of a Gaussian `N(mu, sd²)`.
pub fn expected_improvement(mu: f64, sd: f64, best: f64) -> f64 {
    if sd <= 1e-12 {
        return (best - mu).max(0.0);
    }
    let z = (best - mu) / sd;
    (best - mu) * normal_cdf(z) + sd * normal_pdf(z)
}

/// Minimizes `objective` over the lattice of `bounds` in `dim` dimensions.
///
/// `objective` returns `None` where it cannot be evaluated; such points are
/// recorded with `config.penalty`. Exactly one call per recorded point.
pub fn bo_minimize(
    dim: usize,
    config: &BoConfig,
    objective: &mut dyn FnMut(&[f64]) -> Result<Option<f64>>,
) -> Result<BoState> {
    if dim == 0 || config.budget == 0 {
        return Err(Error::Config("optimization needs ≥1 dimension and a budget ≥1".into()));
    }
    let bounds = config.bounds;
    let m = bounds.steps()?;
    let mut rng = seed::rng(config.seed);
    let mut state = BoState { points: Vec::new(), values: Vec::new(), unstable: Vec::new(), hyper: None, budget: config.budget };
    let mut seen: Vec<Vec<usize>> = Vec::new();
    let mut evaluate = |idx: Vec<usize>, state: &mut BoState, seen: &mut Vec<Vec<usize>>| -> Result<()> {
        let theta: Vec<f64> = idx.iter().map(|&i| bounds.value(i)).collect();
        let (value, unstable) = match objective(&theta)? {
            Some(v) if v.is_finite() => (v, false),
            _ => (config.penalty, true),
        };
        state.points.push(theta);
        state.values.push(value);
        state.unstable.push(unstable);
        seen.push(idx);
        Ok(())
    };

    // Latin-hypercube design snapped to the lattice.
    let n0 = config.initial.clamp(1, config.budget);
    let strata: Vec<Vec<usize>> = (0..dim)
        .map(|_| {
            let mut s: Vec<usize> = (0..n0).collect();
            s.shuffle(&mut rng);
            s
        })
        .collect();
    for j in 0..n0 {
        let idx: Vec<usize> = (0..dim)
            .map(|d| (((strata[d][j] as f64 + rng.random::<f64>()) / n0 as f64) * m as f64).round() as usize)
            .collect();
        if !seen.contains(&idx) {
            evaluate(idx, &mut state, &mut seen)?;
        }
    }

    let unit = |idx: &[usize]| idx.iter().map(|&i| i as f64 / m as f64).collect::<Vec<f64>>();
    let lattice_size = (m + 1).checked_pow(dim as u32).filter(|&s| s <= FULL_LATTICE_LIMIT);
    let mut lengthscales = vec![0.3; dim];
    let mut fitted_at = 0;
    while state.values.len() < config.budget {
        let x: Vec<Vec<f64>> = seen.iter().map(|i| unit(i)).collect();
        if state.hyper.is_none() || state.values.len() >= fitted_at + config.refit_every {
            let (ys, _, _) = Gp::standardized(&state.values, &state.unstable);
            lengthscales = Gp::fit_lengthscales(&x, &DVector::from_vec(ys), &lengthscales, config.nugget);
            fitted_at = state.values.len();
        }
        let gp = Gp::new(x, &state, lengthscales.clone(), config.nugget)?;
        state.hyper = Some(gp.hyper.clone());

        let best_idx = seen[state.best().expect("nonempty design")].clone();
        let candidates: Vec<Vec<usize>> = match lattice_size {
            Some(size) => (0..size)
                .map(|mut flat| {
                    (0..dim)
                        .map(|_| {
                            let i = flat % (m + 1);
                            flat /= m + 1;
                            i
                        })
                        .collect()
                })
                .collect(),
            None => {
                let mut c: Vec<Vec<usize>> =
                    (0..config.candidates).map(|_| (0..dim).map(|_| rng.random_range(0..=m)).collect()).collect();
                for d in 0..dim {
                    for step in [-1i64, 1] {
                        let mut n = best_idx.clone();
                        let v = n[d] as i64 + step;
                        if (0..=m as i64).contains(&v) {
                            n[d] = v as usize;
                            c.push(n);
                        }
                    }
                }
                c
            }
        };
        let (ys, _, _) = Gp::standardized(&state.values, &state.unstable);
        let best_y = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let mut pick: Option<(Vec<usize>, f64)> = None;
        for cand in candidates {
            if seen.contains(&cand) {
                continue;
            }
            let (mu, sd) = gp.predict(&unit(&cand));
            let ei = expected_improvement(mu, sd, best_y);
            if pick.as_ref().is_none_or(|(_, b)| ei > *b) {
                pick = Some((cand, ei));
            }
        }
        match pick {
            Some((idx, _)) => evaluate(idx, &mut state, &mut seen)?,
            None => break,
        }
    }
    Ok(state)
}

/// Simulator access for calibration; every objective evaluation is counted.
pub struct CalibrationObjective<'a> {
    pub hier: &'a GraphHierarchy,
    pub sim: &'a SimParams,
    pub partition: &'a SegmentPartition,
    pub healthy: f64,
    pub context: &'a ContextSet,
    pub stimuli: &'a [Stimulus],
    calls: AtomicUsize,
}

impl<'a> CalibrationObjective<'a> {
    pub fn new(
        hier: &'a GraphHierarchy,
        sim: &'a SimParams,
        partition: &'a SegmentPartition,
        healthy: f64,
        context: &'a ContextSet,
        stimuli: &'a [Stimulus],
    ) -> Result<Self> {
        if context.len() != stimuli.len() {
            return Err(Error::shape(format!("{} context items, {} stimuli", context.len(), stimuli.len())));
        }
        Ok(Self { hier, sim, partition, healthy, context, stimuli, calls: AtomicUsize::new(0) })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// `Σ mse(observe(simulate(θ)), y)` over the context; `None` if the simulator is unstable.
    pub fn evaluate(&self, theta: &[f64]) -> Result<Option<f64>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let tissue = tissue_from(theta, self.partition, self.healthy)?;
        let terms: Vec<Option<f64>> = self
            .context
            .items
            .par_iter()
            .zip(self.stimuli)
            .map(|(obs, stim)| match simulate(self.hier, &tissue, stim, self.sim, "bo") {
                Ok(rec) => Ok(Some(mse(&observe(&rec, &obs.sensor_nodes, 0.0, 0)?.y, &obs.y)?)),
                Err(Error::Unstable { .. }) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<_>>()?;
        Ok(terms.into_iter().sum())
    }
}

pub fn tissue_from(theta: &[f64], partition: &SegmentPartition, healthy: f64) -> Result<TissueField> {
    TissueField::from_excitability(partition.expand(theta)?, healthy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoFit {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub calls: usize,
    pub state: BoState,
}

/// Per-segment excitability minimizing the context misfit.
pub fn bo_fit(objective: &CalibrationObjective, config: &BoConfig) -> Result<BoFit> {
    let state = bo_minimize(objective.partition.count, config, &mut |theta| objective.evaluate(theta))?;
    let best = state.best().expect("budget ≥ 1");
    Ok(BoFit { theta: state.points[best].clone(), objective: state.values[best], calls: objective.calls(), state })
}

/// Simulation of `stimulus` with the tissue reconstructed from `theta`.
pub fn bo_predict(
    theta: &[f64],
    stimulus: &Stimulus,
    hier: &GraphHierarchy,
    partition: &SegmentPartition,
    sim: &SimParams,
    healthy: f64,
) -> Result<SimulationRecord> {
    simulate(hier, &tissue_from(theta, partition, healthy)?, stimulus, sim, "bo")
}

/// Segment-wise calibration as a personalization method.
pub struct BoPersonalizer<'a> {
    pub name: String,
    pub hier: &'a GraphHierarchy,
    pub sim: SimParams,
    pub partition: SegmentPartition,
    pub config: BoConfig,
}

struct BoPredictor<'a> {
    owner: &'a BoPersonalizer<'a>,
    theta: Vec<f64>,
}

impl Personalizer for BoPersonalizer<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn personalize<'b>(&'b self, subject: usize, context: &ContextSet, stimuli: &[Stimulus]) -> Result<Box<dyn Personalized + 'b>> {
        let objective =
            CalibrationObjective::new(self.hier, &self.sim, &self.partition, self.sim.ap.a_healthy, context, stimuli)?;
        let config = BoConfig { seed: seed::derive_index(self.config.seed, subject as u64), ..self.config };
        let fit = bo_fit(&objective, &config)?;
        Ok(Box::new(BoPredictor { owner: self, theta: fit.theta }))
    }
}

impl Personalized for BoPredictor<'_> {
    fn predict(&self, _: Item, stimulus: &Stimulus, _: u64) -> Result<Mat> {
        let o = self.owner;
        Ok(bo_predict(&self.theta, stimulus, o.hier, &o.partition, &o.sim, o.sim.ap.a_healthy)?.x)
    }
}
