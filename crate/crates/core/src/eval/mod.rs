//! Scoring of personalized predictors: MSE, spatial correlation and Dice of
//! the abnormal-activation region, per subject and split, plus the
//! context-size sweep.

mod metrics;

use std::fmt;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{
    abnormal_mask, activation_delay, cc, dice, mean_std, mse, otsu, otsu_threshold, AbnormalMask, MaskSource,
    OtsuSplit, OTSU_BINS,
};

use crate::autodiff::Mat;
use crate::epsim::{Stimulus, Subject, SubjectBank};
use crate::error::{Error, Result};
use crate::metainfer::{posterior, ContextSet, SetEmbedding};
use crate::model::Model;
use crate::nn::GraphOps;
use crate::seed;
use crate::surrogate::{predict_from, StimulusEncoding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Context,
    Target,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Context => "context",
            Split::Target => "target",
        })
    }
}

/// Which record a prediction is for, as seen by the predictor. Targets are
/// numbered by their position in the target list; their observations are
/// never exposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Item {
    Context(usize),
    Target(usize),
}

/// A method that turns a subject's context set into a predictor.
pub trait Personalizer: Sync {
    fn name(&self) -> &str;

    /// Rollouts behind one prediction, used to report per-rollout time.
    fn rollouts_per_prediction(&self) -> usize {
        1
    }

    fn personalize<'a>(
        &'a self,
        subject: usize,
        context: &ContextSet,
        context_stimuli: &[Stimulus],
    ) -> Result<Box<dyn Personalized + 'a>>;
}

pub trait Personalized: Sync {
    /// `T × N` prediction for `stimulus`.
    fn predict(&self, item: Item, stimulus: &Stimulus, seed: u64) -> Result<Mat>;
}

/// Meta-inferred surrogate: one set embedding per context set, Monte-Carlo
/// mean over `samples` conditions per prediction.
pub struct MetaPersonalizer<'m> {
    pub name: String,
    pub model: &'m Model,
    pub ops: &'m GraphOps,
    pub samples: usize,
}

struct MetaPredictor<'m> {
    owner: &'m MetaPersonalizer<'m>,
    embedding: SetEmbedding,
}

impl Personalizer for MetaPersonalizer<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn rollouts_per_prediction(&self) -> usize {
        self.samples
    }

    fn personalize<'a>(&'a self, _: usize, context: &ContextSet, _: &[Stimulus]) -> Result<Box<dyn Personalized + 'a>> {
        let embedding = posterior(self.model, self.ops, context, None)?;
        Ok(Box::new(MetaPredictor { owner: self, embedding }))
    }
}

impl Personalized for MetaPredictor<'_> {
    fn predict(&self, _: Item, stimulus: &Stimulus, seed: u64) -> Result<Mat> {
        let o = self.owner;
        predict_surrogate(o.model, o.ops, stimulus, &self.embedding, o.samples, seed)
    }
}

/// Monte-Carlo mean rollout of `model` over the horizon it was built for.
pub fn predict_surrogate(
    model: &Model,
    ops: &GraphOps,
    stimulus: &Stimulus,
    embedding: &SetEmbedding,
    samples: usize,
    seed: u64,
) -> Result<Mat> {
    let s = StimulusEncoding::new(stimulus, ops.finest_nodes(), model.arch.stimulus_timing)?;
    Ok(predict_from(model, ops, &s, embedding, samples, model.arch.frames, seed)?.mean)
}

/// A context set (record indices into one subject) and the targets scored with it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextChoice {
    pub subject: usize,
    pub context: Vec<usize>,
    pub targets: Vec<usize>,
}

impl ContextChoice {
    /// `context` with every other record of the subject as a target.
    pub fn complement(subject: usize, records: usize, context: Vec<usize>) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::EmptyContext);
        }
        if let Some(&bad) = context.iter().find(|&&r| r >= records) {
            return Err(Error::Config(format!("context record {bad} out of range for {records} records")));
        }
        let targets = (0..records).filter(|r| !context.contains(r)).collect();
        Ok(Self { subject, context, targets })
    }

    /// The first `nu` context records with the same targets.
    pub fn truncated(&self, nu: usize) -> Result<Self> {
        if nu == 0 || nu > self.context.len() {
            return Err(Error::Config(format!("cannot take {nu} of {} context records", self.context.len())));
        }
        Ok(Self { subject: self.subject, context: self.context[..nu].to_vec(), targets: self.targets.clone() })
    }
}

/// `sets` seeded random context sets of `size` records per subject.
pub fn choose_contexts(bank: &SubjectBank, size: usize, sets: usize, seed: u64) -> Result<Vec<ContextChoice>> {
    let mut out = Vec::new();
    for (si, subject) in bank.subjects.iter().enumerate() {
        if size == 0 || size >= subject.len() {
            return Err(Error::Config(format!(
                "context size {size} needs 1..{} for subject {}",
                subject.len(),
                subject.key
            )));
        }
        for set in 0..sets {
            let mut rng = seed::rng(seed::derive_index(seed::derive_index(seed, si as u64), set as u64));
            let context = sample(&mut rng, subject.len(), size).into_vec();
            out.push(ContextChoice::complement(si, subject.len(), context)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub mse: f64,
    pub cc: f64,
    pub dc: f64,
    pub dc_tissue: f64,
}

/// Abnormal mask of a signal; an activation pattern without any spread
/// yields the empty mask.
pub fn mask_or_empty(x: &Mat, source: MaskSource) -> Result<Vec<bool>> {
    match abnormal_mask(x, source) {
        Ok(m) => Ok(m.mask),
        Err(Error::ConstantInput) => Ok(vec![false; x.ncols()]),
        Err(e) => Err(e),
    }
}

pub fn score(pred: &Mat, truth: &Mat, scar: &[bool]) -> Result<Scores> {
    let predicted = mask_or_empty(pred, MaskSource::Predicted)?;
    let observed = mask_or_empty(truth, MaskSource::Truth)?;
    Ok(Scores {
        mse: mse(pred, truth)?,
        cc: cc(pred, truth)?,
        dc: dice(&predicted, &observed)?,
        dc_tissue: dice(&predicted, scar)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemResult {
    pub subject: usize,
    pub split: Split,
    pub record: usize,
    pub nu: usize,
    pub scores: Scores,
    pub prediction: Mat,
}

/// Aggregated scores of one model on one split of one subject (`"all"` pools subjects).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub split: Split,
    pub subject: String,
    pub nu: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub cc_mean: f64,
    pub cc_std: f64,
    pub dc_mean: f64,
    pub dc_std: f64,
    pub n: usize,
    pub embed_seconds: f64,
    pub rollout_seconds: f64,
    pub dc_tissue_mean: f64,
    pub dc_tissue_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<MetricsRow>,
    pub items: Vec<ItemResult>,
}

/// Seed of the prediction for `record` of `subject`; independent of the context set.
pub fn prediction_seed(seed: u64, subject: usize, record: usize) -> u64 {
    seed::derive_index(seed::derive_index(seed, subject as u64), record as u64)
}

fn context_set(subject: &Subject, ids: &[usize]) -> Result<(ContextSet, Vec<Stimulus>)> {
    let items = ids.iter().map(|&r| subject.observations[r].clone()).collect();
    let stimuli = ids.iter().map(|&r| subject.records[r].stimulus.clone()).collect();
    Ok((ContextSet::new(subject.key.clone(), items)?, stimuli))
}

/// Personalizes on every context choice and scores predictions of the
/// requested splits against the ground-truth records.
pub fn evaluate(
    method: &dyn Personalizer,
    bank: &SubjectBank,
    choices: &[ContextChoice],
    splits: &[Split],
    seed: u64,
) -> Result<Evaluation> {
    if choices.is_empty() {
        return Err(Error::Config("no context sets to evaluate".into()));
    }
    let mut items = Vec::new();
    let mut embed_time = vec![Duration::ZERO; bank.subjects.len()];
    let mut embed_count = vec![0usize; bank.subjects.len()];
    let mut rollout_time = vec![Duration::ZERO; bank.subjects.len()];
    let mut rollout_count = vec![0usize; bank.subjects.len()];
    for choice in choices {
        let subject = bank
            .subjects
            .get(choice.subject)
            .ok_or_else(|| Error::Config(format!("subject index {} out of range", choice.subject)))?;
        let (context, stimuli) = context_set(subject, &choice.context)?;
        let start = Instant::now();
        let predictor = method.personalize(choice.subject, &context, &stimuli)?;
        embed_time[choice.subject] += start.elapsed();
        embed_count[choice.subject] += 1;

        let mut jobs: Vec<(Split, Item, usize)> = Vec::new();
        if splits.contains(&Split::Context) {
            jobs.extend(choice.context.iter().enumerate().map(|(i, &r)| (Split::Context, Item::Context(i), r)));
        }
        if splits.contains(&Split::Target) {
            jobs.extend(choice.targets.iter().enumerate().map(|(j, &r)| (Split::Target, Item::Target(j), r)));
        }
        let scored: Vec<(ItemResult, Duration)> = jobs
            .par_iter()
            .map(|&(split, item, record)| {
                let truth = &subject.records[record];
                let start = Instant::now();
                let prediction = predictor.predict(item, &truth.stimulus, prediction_seed(seed, choice.subject, record))?;
                let elapsed = start.elapsed();
                let scores = score(&prediction, &truth.x, &subject.tissue.scar_mask)?;
                let nu = choice.context.len();
                Ok((ItemResult { subject: choice.subject, split, record, nu, scores, prediction }, elapsed))
            })
            .collect::<Result<_>>()?;
        for (item, elapsed) in scored {
            rollout_time[choice.subject] += elapsed;
            rollout_count[choice.subject] += method.rollouts_per_prediction();
            items.push(item);
        }
    }

    let secs = |d: Duration, n: usize| if n == 0 { 0.0 } else { d.as_secs_f64() / n as f64 };
    let mut rows = Vec::new();
    let mut groups: Vec<(Option<usize>, Split, usize)> = Vec::new();
    for it in &items {
        for key in [(Some(it.subject), it.split, it.nu), (None, it.split, it.nu)] {
            if !groups.contains(&key) {
                groups.push(key);
            }
        }
    }
    groups.sort_by_key(|&(s, split, nu)| (s.is_none(), s, split == Split::Target, nu));
    for (subject, split, nu) in groups {
        let members: Vec<&ItemResult> = items
            .iter()
            .filter(|it| it.split == split && it.nu == nu && subject.is_none_or(|s| s == it.subject))
            .collect();
        let stat = |f: fn(&Scores) -> f64| mean_std(&members.iter().map(|m| f(&m.scores)).collect::<Vec<_>>());
        let (mse_mean, mse_std) = stat(|s| s.mse);
        let (cc_mean, cc_std) = stat(|s| s.cc);
        let (dc_mean, dc_std) = stat(|s| s.dc);
        let (dc_tissue_mean, dc_tissue_std) = stat(|s| s.dc_tissue);
        let subjects: Vec<usize> = match subject {
            Some(s) => vec![s],
            None => (0..bank.subjects.len()).collect(),
        };
        let sum = |t: &[Duration], c: &[usize]| {
            let d: Duration = subjects.iter().map(|&s| t[s]).sum();
            secs(d, subjects.iter().map(|&s| c[s]).sum())
        };
        rows.push(MetricsRow {
            model: method.name().to_string(),
            split,
            subject: subject.map_or_else(|| "all".to_string(), |s| bank.subjects[s].key.clone()),
            nu,
            mse_mean,
            mse_std,
            cc_mean,
            cc_std,
            dc_mean,
            dc_std,
            n: members.len(),
            embed_seconds: sum(&embed_time, &embed_count),
            rollout_seconds: sum(&rollout_time, &rollout_count),
            dc_tissue_mean,
            dc_tissue_std,
        });
    }
    Ok(Evaluation { rows, items })
}

/// Target metrics with nested context subsets: for each `nu` the first `nu`
/// records of every choice, targets unchanged.
pub fn context_sweep(
    method: &dyn Personalizer,
    bank: &SubjectBank,
    choices: &[ContextChoice],
    sizes: &[usize],
    seed: u64,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &nu in sizes {
        let subset = choices.iter().map(|c| c.truncated(nu)).collect::<Result<Vec<_>>>()?;
        rows.extend(evaluate(method, bank, &subset, &[Split::Target], seed)?.rows);
    }
    Ok(rows)
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const DC_TISSUE_FILE: &str = "dc_tissue.csv";

#[derive(Serialize, Deserialize)]
struct MetricsRecord {
    model: String,
    split: Split,
    subject: String,
    nu: usize,
    mse_mean: f64,
    mse_std: f64,
    cc_mean: f64,
    cc_std: f64,
    dc_mean: f64,
    dc_std: f64,
    n: usize,
    embed_seconds: f64,
    rollout_seconds: f64,
}

#[derive(Serialize, Deserialize)]
struct TissueRecord {
    model: String,
    split: Split,
    subject: String,
    nu: usize,
    dc_tissue_mean: f64,
    dc_tissue_std: f64,
    n: usize,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Writes `metrics.csv` and `dc_tissue.csv` into `dir`.
pub fn write_metrics(dir: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut m = csv::Writer::from_path(dir.join(METRICS_FILE)).map_err(csv_err)?;
    let mut t = csv::Writer::from_path(dir.join(DC_TISSUE_FILE)).map_err(csv_err)?;
    for r in rows {
        m.serialize(MetricsRecord {
            model: r.model.clone(),
            split: r.split,
            subject: r.subject.clone(),
            nu: r.nu,
            mse_mean: r.mse_mean,
            mse_std: r.mse_std,
            cc_mean: r.cc_mean,
            cc_std: r.cc_std,
            dc_mean: r.dc_mean,
            dc_std: r.dc_std,
            n: r.n,
            embed_seconds: r.embed_seconds,
            rollout_seconds: r.rollout_seconds,
        })
        .map_err(csv_err)?;
        t.serialize(TissueRecord {
            model: r.model.clone(),
            split: r.split,
            subject: r.subject.clone(),
            nu: r.nu,
            dc_tissue_mean: r.dc_tissue_mean,
            dc_tissue_std: r.dc_tissue_std,
            n: r.n,
        })
        .map_err(csv_err)?;
    }
    m.flush()?;
    t.flush()?;
    Ok(())
}

/// Reads `metrics.csv` (and `dc_tissue.csv` when present) back into rows.
pub fn read_metrics(dir: &Path) -> Result<Vec<MetricsRow>> {
    let path = dir.join(METRICS_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact { stage: "eval".into(), path });
    }
    let mut rows = Vec::new();
    for rec in csv::Reader::from_path(&path).map_err(csv_err)?.deserialize() {
        let r: MetricsRecord = rec.map_err(csv_err)?;
        rows.push(MetricsRow {
            model: r.model,
            split: r.split,
            subject: r.subject,
            nu: r.nu,
            mse_mean: r.mse_mean,
            mse_std: r.mse_std,
            cc_mean: r.cc_mean,
            cc_std: r.cc_std,
            dc_mean: r.dc_mean,
            dc_std: r.dc_std,
            n: r.n,
            embed_seconds: r.embed_seconds,
            rollout_seconds: r.rollout_seconds,
            dc_tissue_mean: f64::NAN,
            dc_tissue_std: f64::NAN,
        });
    }
    let tissue = dir.join(DC_TISSUE_FILE);
    if tissue.exists() {
        for (row, rec) in rows.iter_mut().zip(csv::Reader::from_path(&tissue).map_err(csv_err)?.deserialize()) {
            let t: TissueRecord = rec.map_err(csv_err)?;
            row.dc_tissue_mean = t.dc_tissue_mean;
            row.dc_tissue_std = t.dc_tissue_std;
        }
    }
    Ok(rows)
}
