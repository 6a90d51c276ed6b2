//! Episodic meta-training: per-subject context/target episodes, a step-decay
//! learning-rate schedule, Adam updates and resumable checkpoints.

mod checkpoint;
mod episode;
mod optim;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use episode::{sample_episode, Episode};
pub use optim::{Adam, AdamConfig};

use crate::epsim::SubjectBank;
use crate::error::{Error, Result};
use crate::geometry::GraphHierarchy;
use crate::metainfer::{self, LossBreakdown, LossWeights, ParamGrads};
use crate::model::{ArchConfig, Model};
use crate::nn::GraphOps;
use crate::seed;

/// How each subject's episode enters the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Context set of size `ν`, shared by every generation sample.
    Meta,
    /// Every generation sample is conditioned on its own observation only.
    Pns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub lambda_ct: f64,
    pub lambda_prior: f64,
    pub episodes: usize,
    pub nu_max: usize,
    pub origins_per_episode: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_decay: 0.5,
            lr_decay_every: 50,
            lambda_ct: 1e-4,
            lambda_prior: 0.1,
            episodes: 200,
            nu_max: 5,
            origins_per_episode: 25,
            checkpoint_every: 50,
            seed: 0,
            mode: TrainMode::Meta,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("train.{msg}")));
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad("lr_decay must lie in (0, 1)");
        }
        if self.lr_decay_every == 0 || self.checkpoint_every == 0 {
            return bad("lr_decay_every and checkpoint_every must be ≥ 1");
        }
        if !(self.lambda_ct >= 0.0 && self.lambda_prior >= 0.0) {
            return bad("lambda_ct and lambda_prior must be ≥ 0");
        }
        if self.nu_max == 0 || self.origins_per_episode < 2 {
            return bad("nu_max must be ≥ 1 and origins_per_episode ≥ 2");
        }
        let a = &self.adam;
        if !(a.beta1 >= 0.0 && a.beta1 < 1.0 && a.beta2 >= 0.0 && a.beta2 < 1.0 && a.eps > 0.0) {
            return bad("adam constants out of range");
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_ct: self.lambda_ct, lambda_prior: self.lambda_prior }
    }
}

/// `lr₀ · decay^⌊episode / every⌋`.
pub fn lr_at(episode: usize, config: &TrainConfig) -> f64 {
    config.lr * config.lr_decay.powi((episode / config.lr_decay_every) as i32)
}

pub type LossFn = fn(&Model, &GraphOps, &Episode, LossWeights, u64) -> Result<(LossBreakdown, ParamGrads)>;

/// Both modes evaluate the same objective; they differ only in the episodes fed to it.
pub fn loss_fn(_mode: TrainMode) -> LossFn {
    metainfer::loss_and_grad
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub recon: f64,
    pub kl_ct: f64,
    pub kl_prior: f64,
    pub total: f64,
    pub lr: f64,
}

pub const LOSS_LOG: &str = "loss_log.csv";
pub const FINAL_CHECKPOINT: &str = "model.pnsc";

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| Error::Format(e.to_string()))).collect()
}

/// Model, optimizer and progress; everything a checkpoint restores.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub episode: usize,
}

impl TrainState {
    pub fn fresh(arch: &ArchConfig, hier: &GraphHierarchy, config: &TrainConfig) -> Result<Self> {
        let model = Model::new(arch, hier, seed::derive(config.seed, "init"))?;
        let adam = Adam::new(config.adam, &model.params);
        Ok(Self { model, adam, episode: 0 })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Self { model: ckpt.model, adam: ckpt.adam, episode: ckpt.episode }
    }

    pub fn checkpoint(&self, hier: &GraphHierarchy, config: &TrainConfig) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            hierarchy: hier.clone(),
            train: config.clone(),
            episode: self.episode,
            adam: self.adam.clone(),
        }
    }
}

/// Loss and gradient of one training episode: every subject draws an
/// episode from the episode-indexed stream, and the subject means are averaged.
pub fn episode_step(
    bank: &SubjectBank,
    model: &Model,
    ops: &GraphOps,
    config: &TrainConfig,
    episode: usize,
) -> Result<(LossBreakdown, ParamGrads)> {
    let f = loss_fn(config.mode);
    let ep_seed = seed::derive_index(seed::derive(config.seed, "episode"), episode as u64);
    let mut rng = seed::rng(ep_seed);
    let mut terms = Vec::with_capacity(bank.subjects.len());
    let mut grads = ParamGrads::zeros(&model.params);
    let w = 1.0 / bank.subjects.len() as f64;
    for (si, subject) in bank.subjects.iter().enumerate() {
        let ep = sample_episode(subject, config.origins_per_episode, config.nu_max, &mut rng)?;
        let noise = seed::derive_index(ep_seed, si as u64);
        let (t, g) = match config.mode {
            TrainMode::Meta => f(model, ops, &ep, config.weights(), noise)?,
            TrainMode::Pns => {
                let paired = ep.split_paired(subject)?;
                let mut sub_terms = Vec::with_capacity(paired.len());
                let mut sub_grads = ParamGrads::zeros(&model.params);
                for (j, p) in paired.iter().enumerate() {
                    let (t, g) = f(model, ops, p, config.weights(), seed::derive_index(noise, j as u64))?;
                    sub_terms.push(t);
                    sub_grads.merge(&g, 1.0 / paired.len() as f64);
                }
                (LossBreakdown::mean(&sub_terms), sub_grads)
            }
        };
        terms.push(t);
        grads.merge(&g, w);
    }
    Ok((LossBreakdown::mean(&terms), grads))
}

/// Runs episodes `state.episode .. config.episodes`. With `out_dir`,
/// checkpoints land every `checkpoint_every` episodes and at the end, and the
/// loss log is rewritten after each checkpoint; rows from before a resume
/// point are kept.
pub fn train(
    bank: &SubjectBank,
    hier: &GraphHierarchy,
    mut state: TrainState,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(TrainState, Vec<LogRow>)> {
    config.validate()?;
    if bank.subjects.is_empty() {
        return Err(Error::Episode("bank has no subjects".into()));
    }
    let ops = state.model.graph_ops(hier);
    let mut log = Vec::new();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOSS_LOG);
        if state.episode > 0 && path.exists() {
            log = read_log(&path)?.into_iter().filter(|r| r.step < state.episode).collect();
        }
    }
    let persist = |state: &TrainState, log: &[LogRow], name: &str| -> Result<()> {
        if let Some(dir) = out_dir {
            state.checkpoint(hier, config).save(&dir.join(name))?;
            write_log(&dir.join(LOSS_LOG), log)?;
        }
        Ok(())
    };
    while state.episode < config.episodes {
        let e = state.episode;
        let (terms, grads) = episode_step(bank, &state.model, &ops, config, e)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!("gradient at episode {e}")));
        }
        let lr = lr_at(e, config);
        state.adam.update(&mut state.model.params, &grads, lr);
        state.episode += 1;
        log.push(LogRow { step: e, recon: terms.recon, kl_ct: terms.kl_ct, kl_prior: terms.kl_prior, total: terms.total, lr });
        if state.episode % config.checkpoint_every == 0 {
            persist(&state, &log, &format!("checkpoint_e{:04}.pnsc", state.episode))?;
        }
    }
    persist(&state, &log, FINAL_CHECKPOINT)?;
    Ok((state, log))
}
