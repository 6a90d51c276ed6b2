//! The meta-model `q_ζ(c | Y)`: a per-sequence embedding `h_φ`, mean
//! aggregation over the context set, a diagonal Gaussian posterior over the
//! condition vector `c`, and the training objective.

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::epsim::{Observation, SimulationRecord};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, Model};
use crate::nn::{GcnGruCell, GraphOps, Linear};
use crate::params::{ParamId, ParamSet};
use crate::seed;
use crate::surrogate::StimulusEncoding;
use crate::training::Episode;

/// A subject's context observations `Y`, `ν = items.len() ≥ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSet {
    pub subject: String,
    pub items: Vec<Observation>,
}

impl ContextSet {
    pub fn new(subject: impl Into<String>, items: Vec<Observation>) -> Result<Self> {
        let first = items.first().ok_or(Error::EmptyContext)?;
        for item in &items[1..] {
            if item.sensor_nodes != first.sensor_nodes || item.frames() != first.frames() {
                return Err(Error::shape("context items differ in sensor layout or length"));
            }
        }
        Ok(Self { subject: subject.into(), items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Diagonal Gaussian `N(μ, σ²)` over `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetEmbedding {
    pub mu: Array1<f64>,
    pub sigma: Array1<f64>,
}

impl SetEmbedding {
    pub fn standard(dim: usize) -> Self {
        Self { mu: Array1::zeros(dim), sigma: Array1::ones(dim) }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Sequence encoder `h_φ` plus the two posterior heads.
#[derive(Debug, Clone)]
pub struct MetaEncoder {
    pub gru: GcnGruCell,
    pub time: Linear,
    pub feature: Linear,
    pub mu_head: Linear,
    pub sigma_head: Linear,
    pub frames: usize,
    pub coarse_nodes: usize,
    pub sigma_floor: f64,
}

impl MetaEncoder {
    pub fn new(params: &mut ParamSet, arch: &ArchConfig, coarse_nodes: usize, rng: &mut impl rand::Rng) -> Self {
        let dc = arch.cond_dim;
        Self {
            gru: GcnGruCell::new(params, "meta.gru", 2, arch.gru_hidden, rng),
            time: Linear::new(params, "meta.time", arch.frames * arch.gru_hidden, arch.time_hidden, true, rng),
            feature: Linear::new(params, "meta.feature", coarse_nodes * arch.time_hidden, dc, true, rng),
            mu_head: Linear::new(params, "meta.mu_head", dc, dc, true, rng),
            sigma_head: Linear::new(params, "meta.sigma_head", dc, dc, true, rng),
            frames: arch.frames,
            coarse_nodes,
            sigma_floor: arch.sigma_floor,
        }
    }

    /// `h_φ` for a batch of sequences; returns one `d_c` row per sequence.
    pub fn embed_batch(&self, tape: &mut Tape, ops: &GraphOps, seqs: &[&Observation]) -> Result<Var> {
        let n = ops.finest_nodes();
        let k = seqs.len();
        if k == 0 {
            return Err(Error::EmptyContext);
        }
        if ops.coarsest_nodes() != self.coarse_nodes {
            return Err(Error::shape(format!(
                "encoder built for {} coarse nodes, hierarchy has {}",
                self.coarse_nodes,
                ops.coarsest_nodes()
            )));
        }
        for obs in seqs {
            if obs.frames() != self.frames {
                return Err(Error::shape(format!(
                    "sequence has {} frames, encoder expects {}",
                    obs.frames(),
                    self.frames
                )));
            }
            if let Some(&bad) = obs.sensor_nodes.iter().find(|&&s| s >= n) {
                return Err(Error::shape(format!("sensor node {bad} outside mesh of {n} nodes")));
            }
        }
        let mut h = tape.constant(Array2::zeros((k * n, self.gru.hidden)));
        let mut states = Vec::with_capacity(self.frames);
        for t in 0..self.frames {
            let mut x = Array2::zeros((k * n, 2));
            for (b, obs) in seqs.iter().enumerate() {
                for (m, &node) in obs.sensor_nodes.iter().enumerate() {
                    x[[b * n + node, 0]] = obs.y[[t, m]];
                    x[[b * n + node, 1]] = 1.0;
                }
            }
            let ax = tape.constant(ops.adjacency.forward.mul_batched(x.view()));
            h = self.gru.step(tape, &ops.adjacency, ax, h);
            states.push(h);
        }
        let stacked = tape.concat_cols(&states);
        let compressed = self.time.forward(tape, stacked);
        let compressed = tape.elu(compressed);
        let coarse = ops.pool_to_coarsest(tape, compressed);
        let width = tape.shape(coarse).1;
        let flat = tape.reshape(coarse, k, self.coarse_nodes * width);
        Ok(self.feature.forward(tape, flat))
    }

    /// `(μ_c, σ_c)` rows from aggregated embeddings, `σ_c = floor + softplus(raw)`.
    pub fn heads(&self, tape: &mut Tape, agg: Var) -> (Var, Var) {
        let mu = self.mu_head.forward(tape, agg);
        let raw = self.sigma_head.forward(tape, agg);
        let sp = tape.softplus(raw);
        (mu, tape.add_scalar(sp, self.sigma_floor))
    }
}

/// Mean over rows, `1 × cols`.
pub fn mean_rows(tape: &mut Tape, v: Var) -> Var {
    let k = tape.shape(v).0;
    let w = tape.constant(Array2::from_elem((1, k), 1.0 / k as f64));
    tape.matmul(w, v)
}

fn row(tape: &Tape, v: Var) -> Array1<f64> {
    tape.value(v).row(0).to_owned()
}

/// `h_φ(y₁:T)` of one sequence.
pub fn embed_sequence(model: &Model, ops: &GraphOps, obs: &Observation) -> Result<Array1<f64>> {
    let mut tape = Tape::new(&model.params);
    let e = model.meta.embed_batch(&mut tape, ops, &[obs])?;
    Ok(row(&tape, e))
}

/// Mean embedding of the context set.
pub fn aggregate(model: &Model, ops: &GraphOps, context: &ContextSet) -> Result<Array1<f64>> {
    let mut tape = Tape::new(&model.params);
    let refs: Vec<&Observation> = context.items.iter().collect();
    let e = model.meta.embed_batch(&mut tape, ops, &refs)?;
    let m = mean_rows(&mut tape, e);
    Ok(row(&tape, m))
}

/// `p(c | Y)` without `extra`, `q_ζ(c | Y ∪ x)` with the full-node
/// observation of `extra` added to the mean.
pub fn posterior(
    model: &Model,
    ops: &GraphOps,
    context: &ContextSet,
    extra: Option<&SimulationRecord>,
) -> Result<SetEmbedding> {
    let full = extra.map(Observation::full);
    let mut refs: Vec<&Observation> = context.items.iter().collect();
    refs.extend(full.as_ref());
    let mut tape = Tape::new(&model.params);
    let e = model.meta.embed_batch(&mut tape, ops, &refs)?;
    let m = mean_rows(&mut tape, e);
    let (mu, sigma) = model.meta.heads(&mut tape, m);
    Ok(SetEmbedding { mu: row(&tape, mu), sigma: row(&tape, sigma) })
}

/// `c = μ + ε ⊙ σ`.
pub fn condition_from_noise(e: &SetEmbedding, eps: &Array1<f64>) -> Array1<f64> {
    &e.mu + &(eps * &e.sigma)
}

pub fn standard_normal(dim: usize, seed: u64) -> Array1<f64> {
    let mut rng = seed::rng(seed);
    Array1::from_shape_simple_fn(dim, || StandardNormal.sample(&mut rng))
}

/// Reparameterized draw with `ε ~ N(0, I)` from `seed`.
pub fn sample_condition(e: &SetEmbedding, seed: u64) -> Array1<f64> {
    condition_from_noise(e, &standard_normal(e.dim(), seed))
}

/// `KL(q ‖ p)` between diagonal Gaussians, summed over dimensions.
pub fn kl_gaussian(q: &SetEmbedding, p: &SetEmbedding) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::shape(format!("KL between dimensions {} and {}", q.dim(), p.dim())));
    }
    if q.sigma.iter().chain(&p.sigma).any(|&s| !(s > 0.0)) {
        return Err(Error::NonFinite("KL needs strictly positive scales".into()));
    }
    Ok((0..q.dim())
        .map(|i| {
            let (mq, sq, mp, sp) = (q.mu[i], q.sigma[i], p.mu[i], p.sigma[i]);
            (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
        })
        .sum())
}

fn kl_on_tape(tape: &mut Tape, mu_q: Var, sig_q: Var, mu_p: Var, sig_p: Var) -> Var {
    let log_ratio = {
        let lp = tape.ln(sig_p);
        let lq = tape.ln(sig_q);
        tape.sub(lp, lq)
    };
    let sq2 = tape.square(sig_q);
    let diff = tape.sub(mu_q, mu_p);
    let d2 = tape.square(diff);
    let num = tape.add(sq2, d2);
    let sp2 = tape.square(sig_p);
    let den = tape.scale(sp2, 2.0);
    let frac = tape.div(num, den);
    let per_dim = tape.add(log_ratio, frac);
    let total = tape.sum(per_dim);
    let dims = tape.shape(mu_q).1 as f64;
    tape.add_scalar(total, -0.5 * dims)
}

/// `KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ (σ² + μ² − 1 − 2 ln σ)`.
fn kl_standard_on_tape(tape: &mut Tape, mu: Var, sig: Var) -> Var {
    let s2 = tape.square(sig);
    let m2 = tape.square(mu);
    let ls = tape.ln(sig);
    let two_ls = tape.scale(ls, 2.0);
    let a = tape.add(s2, m2);
    let b = tape.sub(a, two_ls);
    let total = tape.sum(b);
    let dims = tape.shape(mu).1 as f64;
    let shifted = tape.add_scalar(total, -dims);
    tape.scale(shifted, 0.5)
}

/// Loss multipliers `λ₁` (context/target KL) and `λ₂` (prior KL).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ct: f64,
    pub lambda_prior: f64,
}

/// Episode-averaged loss terms. `recon` is the log-likelihood
/// `−½ SSE`, so `total = −recon + λ₁·kl_ct + λ₂·kl_prior`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_ct: f64,
    pub kl_prior: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &Self, w: f64) {
        self.recon += w * other.recon;
        self.kl_ct += w * other.kl_ct;
        self.kl_prior += w * other.kl_prior;
        self.total += w * other.total;
    }

    pub fn mean<'a>(items: impl IntoIterator<Item = &'a Self>) -> Self {
        let items: Vec<_> = items.into_iter().collect();
        let mut out = Self::default();
        for it in &items {
            out.accumulate(it, 1.0 / items.len() as f64);
        }
        out
    }
}

/// Gradient per parameter, indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<Mat>);

impl ParamGrads {
    pub fn zeros(params: &ParamSet) -> Self {
        Self(params.iter().map(|(_, _, v)| Array2::zeros(v.dim())).collect())
    }

    pub fn add(&mut self, id: ParamId, g: &Mat, w: f64) {
        self.0[id.0].scaled_add(w, g);
    }

    pub fn merge(&mut self, other: &Self, w: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.scaled_add(w, b);
        }
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.0[id.0]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

struct SampleOutcome {
    terms: LossBreakdown,
    grads: Vec<(ParamId, Mat)>,
    context_grad: Mat,
}

fn ensure_finite(terms: &LossBreakdown) -> Result<()> {
    for (name, v) in [
        ("reconstruction", terms.recon),
        ("kl_context_target", terms.kl_ct),
        ("kl_prior", terms.kl_prior),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name} is {v}")));
        }
    }
    Ok(())
}

/// Loss for one generation sample given the context mean `m` as a leaf.
fn sample_loss(
    model: &Model,
    ops: &GraphOps,
    context_mean: &Mat,
    nu: usize,
    record: &SimulationRecord,
    eps: &Array1<f64>,
    weights: LossWeights,
    want_grad: bool,
) -> Result<SampleOutcome> {
    let mut tape = Tape::new(&model.params);
    let m = tape.constant(context_mean.clone());
    let full = Observation::full(record);
    let ex = model.meta.embed_batch(&mut tape, ops, &[&full])?;
    let nu_f = nu as f64;
    let agg = {
        let a = tape.scale(m, nu_f / (nu_f + 1.0));
        let b = tape.scale(ex, 1.0 / (nu_f + 1.0));
        tape.add(a, b)
    };
    let (mu_q, sig_q) = model.meta.heads(&mut tape, agg);
    let (mu_p, sig_p) = model.meta.heads(&mut tape, m);
    let eps = tape.constant(eps.clone().insert_axis(ndarray::Axis(0)));
    let noise = tape.mul(eps, sig_q);
    let c = tape.add(mu_q, noise);
    let stim = StimulusEncoding::new(&record.stimulus, record.nodes(), model.arch.stimulus_timing)?;
    let xhat = model.surrogate.rollout(&mut tape, ops, &stim, c, record.frames())?;
    let truth = tape.constant(record.x.clone());
    let diff = tape.sub(xhat, truth);
    let sq = tape.square(diff);
    let sse = tape.sum(sq);
    let nll = tape.scale(sse, 0.5);
    let kl_ct = kl_on_tape(&mut tape, mu_q, sig_q, mu_p, sig_p);
    let kl_prior = kl_standard_on_tape(&mut tape, mu_p, sig_p);
    let a = tape.scale(kl_ct, weights.lambda_ct);
    let b = tape.scale(kl_prior, weights.lambda_prior);
    let reg = tape.add(a, b);
    let total = tape.add(nll, reg);
    let scalar = |v: Var| tape.value(v)[[0, 0]];
    let terms = LossBreakdown {
        recon: -scalar(nll),
        kl_ct: scalar(kl_ct),
        kl_prior: scalar(kl_prior),
        total: scalar(total),
    };
    ensure_finite(&terms)?;
    if !want_grad {
        return Ok(SampleOutcome { terms, grads: Vec::new(), context_grad: Array2::zeros((0, 0)) });
    }
    let g = tape.backward(total);
    let context_grad = g.of(m).cloned().unwrap_or_else(|| Array2::zeros(context_mean.dim()));
    Ok(SampleOutcome { terms, grads: g.params(&tape), context_grad })
}

fn episode_loss(
    model: &Model,
    ops: &GraphOps,
    episode: &Episode,
    weights: LossWeights,
    seed: u64,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<ParamGrads>)> {
    let samples = episode.generation_set();
    if samples.is_empty() {
        return Err(Error::Episode("episode has no generation samples".into()));
    }
    let mut ctx_tape = Tape::new(&model.params);
    let refs: Vec<&Observation> = episode.context.items.iter().collect();
    let emb = model.meta.embed_batch(&mut ctx_tape, ops, &refs)?;
    let m = mean_rows(&mut ctx_tape, emb);
    let m_value = ctx_tape.value(m).clone();
    let nu = episode.context.len();
    let dc = model.arch.cond_dim;
    let outcomes: Vec<Result<SampleOutcome>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, record)| {
            let eps = standard_normal(dc, seed::derive_index(seed, i as u64));
            sample_loss(model, ops, &m_value, nu, record, &eps, weights, want_grad)
        })
        .collect();
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let w = 1.0 / outcomes.len() as f64;
    let terms = LossBreakdown::mean(outcomes.iter().map(|o| &o.terms));
    if !want_grad {
        return Ok((terms, None));
    }
    let mut grads = ParamGrads::zeros(&model.params);
    let mut m_grad = Array2::zeros(m_value.dim());
    for o in &outcomes {
        for (id, g) in &o.grads {
            grads.add(*id, g, w);
        }
        m_grad.scaled_add(w, &o.context_grad);
    }
    let g = ctx_tape.backward_from(vec![(m, m_grad)]);
    for (id, gp) in g.params(&ctx_tape) {
        grads.add(id, &gp, 1.0);
    }
    Ok((terms, Some(grads)))
}

/// Episode loss, averaged over the generation samples `D_x`. Each sample
/// draws one `c ~ q_ζ(c | Y ∪ x)` with noise seeded by `(seed, sample index)`.
pub fn loss(model: &Model, ops: &GraphOps, episode: &Episode, weights: LossWeights, seed: u64) -> Result<LossBreakdown> {
    episode_loss(model, ops, episode, weights, seed, false).map(|(t, _)| t)
}

/// [`loss`] together with its gradient for every parameter.
pub fn loss_and_grad(
    model: &Model,
    ops: &GraphOps,
    episode: &Episode,
    weights: LossWeights,
    seed: u64,
) -> Result<(LossBreakdown, ParamGrads)> {
    let (terms, grads) = episode_loss(model, ops, episode, weights, seed, true)?;
    Ok((terms, grads.expect("gradient requested")))
}
