//! The set-conditioned generative surrogate `p(x̂₁:T | s, c)`.
//!
//! A graph encoder maps the stimulus to a per-coarse-node latent state `z₀`,
//! a conditional gated transition advances `z_t` under the subject embedding
//! `c`, and a graph decoder emits one potential per finest node and frame.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{Mat, Tape, Var};
use crate::epsim::Stimulus;
use crate::error::{Error, Result};
use crate::metainfer::{posterior, sample_condition, ContextSet, SetEmbedding};
use crate::model::{ArchConfig, Model};
use crate::nn::{GcnnBlock, GraphOps, Linear};
use crate::params::{ParamId, ParamSet};
use crate::seed;

/// Network-facing stimulus: an origin indicator channel per finest node,
/// optionally followed by broadcast onset and duration channels.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusEncoding {
    pub channels: Mat,
}

impl StimulusEncoding {
    pub fn new(stim: &Stimulus, nodes: usize, timing: bool) -> Result<Self> {
        stim.validate(nodes)?;
        let width = if timing { 3 } else { 1 };
        let mut channels = Array2::zeros((nodes, width));
        for &o in &stim.origins {
            channels[[o, 0]] = 1.0;
        }
        if timing {
            channels.column_mut(1).fill(stim.onset);
            channels.column_mut(2).fill(stim.duration);
        }
        Ok(Self { channels })
    }

    pub fn nodes(&self) -> usize {
        self.channels.nrows()
    }

    /// Relabels nodes: row `i` moves to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut channels = Array2::zeros(self.channels.dim());
        for (old, &new) in perm.iter().enumerate() {
            channels.row_mut(new).assign(&self.channels.row(old));
        }
        Self { channels }
    }
}

/// Conditional gated transition:
///
/// ```text
/// z⁽¹⁾ = ELU(z·α₁ + c·β₁ + γ₁)     g = σ(z⁽¹⁾·W₁ + b₁)
/// z⁽²⁾ = ELU(z·α₂ + c·β₂ + γ₂)     h = ELU(z⁽²⁾·W₂ + b₂)
/// z⁽³⁾ =     z·α₃ + c·β₃ + γ₃
/// z'   = (1 − g) ⊙ (z⁽³⁾·W₃ + b₃) + g ⊙ h
/// ```
///
/// `c` is broadcast to every coarse node.
#[derive(Debug, Clone)]
pub struct Transition {
    pub w: [Linear; 3],
    pub alpha: [ParamId; 3],
    pub beta: [ParamId; 3],
    pub gamma: [ParamId; 3],
}

/// Per-rollout constants `c·β_i + γ_i`.
#[derive(Debug, Clone, Copy)]
pub struct ConditionTerms([Var; 3]);

/// Intermediate values of one transition step.
#[derive(Debug, Clone, Copy)]
pub struct StepTrace {
    pub gate: Var,
    pub nonlinear: Var,
    pub linear: Var,
    pub next: Var,
}

impl Transition {
    pub fn new(params: &mut ParamSet, name: &str, dz: usize, dc: usize, rng: &mut impl Rng) -> Self {
        let w = [
            Linear::new(params, &format!("{name}.w1"), dz, dz, true, rng),
            Linear::new(params, &format!("{name}.w2"), dz, dz, true, rng),
            Linear::identity(params, &format!("{name}.w3"), dz),
        ];
        // Identity α, identity W₃ and zero β₃ start the linear branch at
        // z' = z, so an untrained rollout stays bounded over long horizons
        // for any c.
        let alpha = [1, 2, 3].map(|i| params.add(format!("{name}.alpha{i}"), Array2::eye(dz)));
        let beta = [
            params.add_glorot(&format!("{name}.beta1"), dc, dz, rng),
            params.add_glorot(&format!("{name}.beta2"), dc, dz, rng),
            params.add_zeros(&format!("{name}.beta3"), (dc, dz)),
        ];
        let gamma = [1, 2, 3].map(|i| params.add_zeros(&format!("{name}.gamma{i}"), (1, dz)));
        Self { w, alpha, beta, gamma }
    }

    pub fn condition(&self, tape: &mut Tape, c: Var) -> ConditionTerms {
        ConditionTerms([0, 1, 2].map(|i| {
            let beta = tape.param(self.beta[i]);
            let cb = tape.matmul(c, beta);
            let gamma = tape.param(self.gamma[i]);
            tape.add(cb, gamma)
        }))
    }

    pub fn step(&self, tape: &mut Tape, z: Var, cond: &ConditionTerms) -> Result<StepTrace> {
        let mut pre = [z; 3];
        for (i, slot) in pre.iter_mut().enumerate() {
            let alpha = tape.param(self.alpha[i]);
            let za = tape.matmul(z, alpha);
            *slot = tape.add_row(za, cond.0[i]);
        }
        let z1 = tape.elu(pre[0]);
        let g = self.w[0].forward(tape, z1);
        let g = tape.sigmoid(g);
        check_finite(tape, g, "update gate g")?;
        let z2 = tape.elu(pre[1]);
        let h = self.w[1].forward(tape, z2);
        let h = tape.elu(h);
        check_finite(tape, h, "nonlinear branch h")?;
        let lin = self.w[2].forward(tape, pre[2]);
        check_finite(tape, lin, "linear branch")?;
        let keep = tape.one_minus(g);
        let linear_part = tape.mul(keep, lin);
        let gated = tape.mul(g, h);
        let next = tape.add(linear_part, gated);
        Ok(StepTrace { gate: g, nonlinear: h, linear: lin, next })
    }
}

fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("transition {what}")))
    }
}

#[derive(Debug, Clone)]
pub struct Surrogate {
    pub enc_in: Linear,
    pub enc_blocks: Vec<GcnnBlock>,
    pub enc_out: Linear,
    pub stim_head: Linear,
    pub transition: Transition,
    pub dec_in: Linear,
    pub dec_blocks: Vec<GcnnBlock>,
    pub dec_out: Linear,
}

impl Surrogate {
    pub fn new(params: &mut ParamSet, arch: &ArchConfig, rng: &mut impl Rng) -> Self {
        let c = arch.hidden;
        let basis = arch.kernel_size.pow(3);
        let stim_channels = if arch.stimulus_timing { 3 } else { 1 };
        let enc_in = Linear::new(params, "surrogate.encoder.conv_in", stim_channels, c, true, rng);
        let enc_blocks = (0..arch.blocks)
            .map(|i| GcnnBlock::new(params, &format!("surrogate.encoder.block{i}"), c, c, basis, rng))
            .collect();
        let enc_out = Linear::new(params, "surrogate.encoder.conv_out", c, c, true, rng);
        let stim_head = Linear::new(params, "surrogate.stim_head", c, arch.latent_dim, true, rng);
        let transition = Transition::new(params, "surrogate.transition", arch.latent_dim, arch.cond_dim, rng);
        let dec_in = Linear::new(params, "surrogate.decoder.conv_in", arch.latent_dim, c, true, rng);
        let dec_blocks = (0..arch.blocks)
            .map(|i| GcnnBlock::new(params, &format!("surrogate.decoder.block{i}"), c, c, basis, rng))
            .collect();
        let dec_out = Linear::new(params, "surrogate.decoder.conv_out", c, 1, true, rng);
        Self { enc_in, enc_blocks, enc_out, stim_head, transition, dec_in, dec_blocks, dec_out }
    }

    /// `z₀ = f_ρ(encoder(s))` on the coarsest level.
    pub fn encode_stimulus(&self, tape: &mut Tape, ops: &GraphOps, s: &StimulusEncoding) -> Result<Var> {
        if s.nodes() != ops.finest_nodes() {
            return Err(Error::shape(format!(
                "stimulus encoding has {} nodes, hierarchy {}",
                s.nodes(),
                ops.finest_nodes()
            )));
        }
        let x = tape.constant(s.channels.clone());
        let x = self.enc_in.forward(tape, x);
        let mut x = tape.elu(x);
        let last = ops.levels() - 1;
        let mut level = 0;
        for (i, block) in self.enc_blocks.iter().enumerate() {
            let want = i.min(last);
            while level < want {
                x = tape.sparse(&ops.pool[level], x);
                level += 1;
            }
            x = block.forward(tape, x, &ops.bases[level])?;
        }
        while level < last {
            x = tape.sparse(&ops.pool[level], x);
            level += 1;
        }
        let x = self.enc_out.forward(tape, x);
        let x = tape.elu(x);
        Ok(self.stim_head.forward(tape, x))
    }

    /// Decodes a batch of coarse latent frames (`frames · N_c` rows) into
    /// finest-level potentials, `frames · N` rows × 1 column.
    pub fn emit(&self, tape: &mut Tape, ops: &GraphOps, z: Var) -> Result<Var> {
        let rows = tape.shape(z).0;
        if rows % ops.coarsest_nodes() != 0 {
            return Err(Error::shape(format!(
                "latent has {rows} rows, not a multiple of {} coarse nodes",
                ops.coarsest_nodes()
            )));
        }
        let x = self.dec_in.forward(tape, z);
        let mut x = tape.elu(x);
        let last = ops.levels() - 1;
        let mut level = last;
        for (j, block) in self.dec_blocks.iter().enumerate() {
            let want = last.saturating_sub(j);
            while level > want {
                x = tape.sparse(&ops.unpool[level - 1], x);
                level -= 1;
            }
            x = block.forward(tape, x, &ops.bases[level])?;
        }
        while level > 0 {
            x = tape.sparse(&ops.unpool[level - 1], x);
            level -= 1;
        }
        Ok(self.dec_out.forward(tape, x))
    }

    /// Encodes `s`, advances the latent `frames` times under `c` and emits
    /// every step. Returns a `frames × N` matrix.
    pub fn rollout(&self, tape: &mut Tape, ops: &GraphOps, s: &StimulusEncoding, c: Var, frames: usize) -> Result<Var> {
        if frames == 0 {
            return Err(Error::shape("rollout needs at least one frame"));
        }
        let mut z = self.encode_stimulus(tape, ops, s)?;
        let cond = self.transition.condition(tape, c);
        let mut states = Vec::with_capacity(frames);
        for _ in 0..frames {
            z = self.transition.step(tape, z, &cond)?.next;
            states.push(z);
        }
        let stacked = tape.concat_rows(&states);
        let x = self.emit(tape, ops, stacked)?;
        Ok(tape.reshape(x, frames, ops.finest_nodes()))
    }
}

/// Monte-Carlo samples of the personalized surrogate and their pointwise mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub samples: Vec<Mat>,
    pub mean: Mat,
}

/// Rolls out `s` under `c` given as a plain vector; `frames × N`.
pub fn rollout_with(model: &Model, ops: &GraphOps, s: &StimulusEncoding, c: &Array1<f64>, frames: usize) -> Result<Mat> {
    if c.len() != model.arch.cond_dim {
        return Err(Error::shape(format!("condition has {} entries, model expects {}", c.len(), model.arch.cond_dim)));
    }
    let mut tape = Tape::new(&model.params);
    let cv = tape.constant(c.clone().insert_axis(Axis(0)));
    let x = model.surrogate.rollout(&mut tape, ops, s, cv, frames)?;
    Ok(tape.value(x).clone())
}

/// Draws `n_samples` conditions from `embedding` (sample `i` seeded by
/// `(seed, i)`) and rolls each out.
pub fn predict_from(
    model: &Model,
    ops: &GraphOps,
    s: &StimulusEncoding,
    embedding: &SetEmbedding,
    n_samples: usize,
    frames: usize,
    seed: u64,
) -> Result<Prediction> {
    if n_samples == 0 {
        return Err(Error::shape("prediction needs at least one sample"));
    }
    let samples = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let c = sample_condition(embedding, seed::derive_index(seed, i as u64));
            rollout_with(model, ops, s, &c, frames)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean = Mat::zeros(samples[0].dim());
    for x in &samples {
        mean.scaled_add(1.0 / n_samples as f64, x);
    }
    Ok(Prediction { samples, mean })
}

/// Monte-Carlo estimate of `∫ p(x̂ | s, c) q_ζ(c | Y) dc`.
pub fn predict(
    model: &Model,
    ops: &GraphOps,
    s: &StimulusEncoding,
    context: &ContextSet,
    n_samples: usize,
    frames: usize,
    seed: u64,
) -> Result<Prediction> {
    if context.is_empty() {
        return Err(Error::EmptyContext);
    }
    let embedding = posterior(model, ops, context, None)?;
    predict_from(model, ops, s, &embedding, n_samples, frames, seed)
}
