//! Config-driven experiment runs. Stages execute in a fixed order, each
//! keyed by a hash of the configuration it depends on, and completed stages
//! are recorded in an atomically written manifest.
//!
//! Stage seeds descend from the root seed as `derive(root, label)` with
//! labels `hierarchy`, `dataset`, `train`, `contexts`, `eval`, `pns`,
//! `segments` and `bo`; meta-training run `r` uses `derive_index(derive(root, "train"), r)`.

mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{hash_json, BaselineSpec, EvalSpec, ExperimentConfig, HierarchySpec, MeshSpec};

use crate::arrayio::{self, Dtype};
use crate::autodiff::Mat;
use crate::baselines::{segment_partition, BoPersonalizer, PnsPersonalizer};
use crate::epsim::{simulate, SubjectBank};
use crate::error::{Error, Result};
use crate::eval::{
    choose_contexts, context_sweep, evaluate, write_metrics, ContextChoice, Evaluation, MetaPersonalizer, MetricsRow,
    Personalizer, Split,
};
use crate::geometry::GraphHierarchy;
use crate::metainfer::{posterior, ContextSet};
use crate::seed;
use crate::surrogate::{predict_from, StimulusEncoding};
use crate::training::{self, Checkpoint, TrainConfig, TrainMode, TrainState, FINAL_CHECKPOINT, LOSS_LOG};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const TIMING_FILE: &str = "timing.csv";
pub const META_MODEL: &str = "metapns";
pub const PNS_MODEL: &str = "pns";
pub const BO_MODEL: &str = "fsbo";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Dataset,
    Train,
    Eval,
    Sweep,
    Baselines,
    Plots,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Dataset, Stage::Train, Stage::Eval, Stage::Sweep, Stage::Baselines, Stage::Plots];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Dataset => "dataset",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
            Stage::Baselines => "baselines",
            Stage::Plots => "plots",
        }
    }

    /// Stages whose artifacts this stage reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Dataset => &[],
            Stage::Train => &[Stage::Dataset],
            Stage::Eval | Stage::Sweep => &[Stage::Dataset, Stage::Train],
            Stage::Baselines => &[Stage::Dataset],
            Stage::Plots => &[Stage::Dataset, Stage::Eval, Stage::Sweep],
        }
    }

    pub fn dir(self, root: &Path) -> PathBuf {
        root.join(self.name())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub hash: String,
    pub seconds: f64,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub seeds: BTreeMap<String, u64>,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl RunManifest {
    pub fn load(root: &Path) -> Result<Option<Self>> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).map(Some).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, root: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&root.join(MANIFEST_FILE), text.as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Hash of the configuration a stage's artifacts depend on.
pub fn stage_hash(config: &ExperimentConfig, stage: Stage) -> String {
    let c = config;
    match stage {
        Stage::Dataset => hash_json(&(c.seed, &c.mesh, &c.hierarchy, &c.dataset)),
        Stage::Train => hash_json(&(stage_hash(c, Stage::Dataset), &c.arch, &c.train, c.runs)),
        Stage::Eval => hash_json(&("eval", stage_hash(c, Stage::Train), &c.eval)),
        Stage::Sweep => hash_json(&("sweep", stage_hash(c, Stage::Train), &c.eval)),
        Stage::Baselines => hash_json(&(stage_hash(c, Stage::Dataset), &c.arch, &c.train, &c.eval, &c.baselines)),
        Stage::Plots => hash_json(&(stage_hash(c, Stage::Eval), stage_hash(c, Stage::Sweep), stage_hash(c, Stage::Baselines))),
    }
}

pub fn stage_seeds(root: u64) -> BTreeMap<String, u64> {
    ["hierarchy", "dataset", "train", "contexts", "eval", "pns", "segments", "bo"]
        .into_iter()
        .map(|label| (label.to_string(), seed::derive(root, label)))
        .collect()
}

/// Settings of meta-training run `r`.
pub fn meta_train_config(config: &ExperimentConfig, run: usize) -> TrainConfig {
    TrainConfig {
        seed: seed::derive_index(seed::derive(config.seed, "train"), run as u64),
        mode: TrainMode::Meta,
        ..config.train.clone()
    }
}

pub fn pns_train_config(config: &ExperimentConfig) -> TrainConfig {
    TrainConfig { seed: seed::derive(config.seed, "pns"), mode: TrainMode::Pns, ..config.train.clone() }
}

pub fn meta_run_dir(root: &Path, run: usize) -> PathBuf {
    Stage::Train.dir(root).join(format!("meta_r{run}"))
}

pub fn pns_run_dir(root: &Path) -> PathBuf {
    Stage::Baselines.dir(root).join("pns")
}

pub fn prediction_dir(root: &Path) -> PathBuf {
    root.join("predictions")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub manifest: RunManifest,
    pub ran: Vec<Stage>,
    pub skipped: Vec<Stage>,
}

fn missing(stage: Stage, path: PathBuf) -> Error {
    Error::MissingArtifact { stage: stage.name().into(), path }
}

fn check_recorded(manifest: &RunManifest, config: &ExperimentConfig, root: &Path, stage: Stage) -> Result<bool> {
    let Some(record) = manifest.stages.get(&stage) else {
        return Ok(false);
    };
    if record.hash != stage_hash(config, stage) {
        return Err(Error::StaleArtifact(stage.name().into()));
    }
    if let Some(p) = record.artifacts.iter().find(|p| !root.join(p).exists()) {
        return Err(missing(stage, root.join(p)));
    }
    Ok(true)
}

/// Runs the requested stages in order, skipping stages whose recorded hash
/// matches the current configuration. A recorded stage with a different hash
/// is an error unless `force`, in which case it is recomputed.
pub fn run_pipeline(config: &ExperimentConfig, stages: &[Stage], force: bool) -> Result<PipelineRun> {
    config.validate()?;
    let root = config.out_dir.clone();
    fs::create_dir_all(&root)?;
    write_atomic(&root.join(CONFIG_FILE), config.to_toml()?.as_bytes())?;
    let mut manifest = match RunManifest::load(&root)? {
        Some(m) => m,
        None => RunManifest {
            config_hash: String::new(),
            code_version: String::new(),
            seeds: BTreeMap::new(),
            stages: BTreeMap::new(),
        },
    };
    manifest.config_hash = config.hash();
    manifest.code_version = env!("CARGO_PKG_VERSION").to_string();
    manifest.seeds = stage_seeds(config.seed);
    manifest.save(&root)?;

    let mut requested: Vec<Stage> = stages.to_vec();
    requested.sort();
    requested.dedup();
    let mut ran = Vec::new();
    let mut skipped = Vec::new();
    for stage in requested.iter().copied() {
        for &up in stage.upstream() {
            if !requested.contains(&up) && !check_recorded(&manifest, config, &root, up)? {
                return Err(missing(up, root.join(MANIFEST_FILE)));
            }
        }
        match check_recorded(&manifest, config, &root, stage) {
            Ok(true) => {
                skipped.push(stage);
                continue;
            }
            Ok(false) => {}
            Err(Error::StaleArtifact(_) | Error::MissingArtifact { .. }) if force => {}
            Err(e) => return Err(e),
        }
        let start = Instant::now();
        let artifacts = run_stage(config, &root, stage)?;
        let record = StageRecord { hash: stage_hash(config, stage), seconds: start.elapsed().as_secs_f64(), artifacts };
        manifest.stages.insert(stage, record);
        manifest.save(&root)?;
        ran.push(stage);
    }
    Ok(PipelineRun { manifest, ran, skipped })
}

fn relative(root: &Path, paths: Vec<PathBuf>) -> Vec<PathBuf> {
    paths.into_iter().map(|p| p.strip_prefix(root).map(Path::to_path_buf).unwrap_or(p)).collect()
}

fn run_stage(config: &ExperimentConfig, root: &Path, stage: Stage) -> Result<Vec<PathBuf>> {
    let artifacts = match stage {
        Stage::Dataset => stage_dataset(config, root)?,
        Stage::Train => stage_train(config, root)?,
        Stage::Eval => stage_eval(config, root)?,
        Stage::Sweep => stage_sweep(config, root)?,
        Stage::Baselines => stage_baselines(config, root)?,
        Stage::Plots => crate::report::render_reports(root)?,
    };
    Ok(relative(root, artifacts))
}

pub fn load_dataset(root: &Path) -> Result<(SubjectBank, GraphHierarchy)> {
    SubjectBank::load(&Stage::Dataset.dir(root))
}

/// Builds the hierarchy and simulates the subject bank of `config`.
pub fn build_dataset(config: &ExperimentConfig) -> Result<(SubjectBank, GraphHierarchy)> {
    let hier = config.hierarchy()?;
    let bank = config.dataset.generate(&hier, seed::derive(config.seed, "dataset"))?;
    Ok((bank, hier))
}

fn stage_dataset(config: &ExperimentConfig, root: &Path) -> Result<Vec<PathBuf>> {
    let (bank, hier) = build_dataset(config)?;
    let dir = Stage::Dataset.dir(root);
    bank.save(&dir, &hier)?;
    Ok(vec![dir.join("manifest.toml")])
}

/// The newest checkpoint in `dir` written under `config`, if any.
fn latest_checkpoint(dir: &Path, config: &TrainConfig) -> Result<Option<Checkpoint>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("checkpoint_e")))
        .collect();
    names.sort();
    for path in names.into_iter().rev() {
        let ckpt = Checkpoint::load(&path)?;
        if &ckpt.train == config {
            return Ok(Some(ckpt));
        }
    }
    Ok(None)
}

/// Trains into `dir`, resuming from the newest matching checkpoint.
pub fn train_run(
    bank: &SubjectBank,
    hier: &GraphHierarchy,
    arch: &crate::model::ArchConfig,
    config: &TrainConfig,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let state = match latest_checkpoint(dir, config)? {
        Some(ckpt) if &ckpt.model.arch == arch => TrainState::from_checkpoint(ckpt),
        _ => TrainState::fresh(arch, hier, config)?,
    };
    training::train(bank, hier, state, config, Some(dir))?;
    Ok(vec![dir.join(FINAL_CHECKPOINT), dir.join(LOSS_LOG)])
}

fn stage_train(config: &ExperimentConfig, root: &Path) -> Result<Vec<PathBuf>> {
    let (bank, hier) = load_dataset(root)?;
    let mut artifacts = Vec::new();
    for run in 0..config.runs {
        artifacts.extend(train_run(&bank, &hier, &config.arch, &meta_train_config(config, run), &meta_run_dir(root, run))?);
    }
    Ok(artifacts)
}

pub fn load_model(dir: &Path, stage: Stage) -> Result<Checkpoint> {
    let path = dir.join(FINAL_CHECKPOINT);
    if !path.exists() {
        return Err(missing(stage, path));
    }
    Checkpoint::load(&path)
}

pub fn context_choices(config: &ExperimentConfig, bank: &SubjectBank) -> Result<Vec<ContextChoice>> {
    choose_contexts(bank, config.eval.context_size, config.eval.sets_per_subject, seed::derive(config.seed, "contexts"))
}

/// Stores truth and prediction of the first target of each subject for the report panels.
fn save_predictions(root: &Path, bank: &SubjectBank, model: &str, ev: &Evaluation) -> Result<Vec<PathBuf>> {
    let dir = prediction_dir(root);
    fs::create_dir_all(&dir)?;
    let mut out = Vec::new();
    for (si, subject) in bank.subjects.iter().enumerate() {
        let Some(item) = ev.items.iter().find(|it| it.subject == si && it.split == Split::Target) else {
            continue;
        };
        let truth = dir.join(format!("{}_truth.pnsa", subject.key));
        arrayio::save(&truth, &subject.records[item.record].x, Dtype::F32)?;
        let pred = dir.join(format!("{}_{model}.pnsa", subject.key));
        arrayio::save(&pred, &item.prediction, Dtype::F32)?;
        out.extend([truth, pred]);
    }
    Ok(out)
}

/// Mean wall-clock seconds of a simulator call, a single surrogate rollout and
/// a context embedding over the first `n` records of subject 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub simulate_seconds: f64,
    pub rollout_seconds: f64,
    pub embed_seconds: f64,
    pub speedup: f64,
}

pub fn measure_timing(ckpt: &Checkpoint, bank: &SubjectBank, hier: &GraphHierarchy, context: usize, n: usize) -> Result<Timing> {
    let subject = &bank.subjects[0];
    let n = n.min(subject.len()).max(1);
    let ops = ckpt.model.graph_ops(hier);
    let ctx = ContextSet::new(subject.key.clone(), subject.observations[..context.min(subject.len())].to_vec())?;
    let start = Instant::now();
    let embedding = posterior(&ckpt.model, &ops, &ctx, None)?;
    let embed_seconds = start.elapsed().as_secs_f64();
    let mut sim = 0.0;
    let mut roll = 0.0;
    for rec in &subject.records[..n] {
        let start = Instant::now();
        simulate(hier, &subject.tissue, &rec.stimulus, &bank.sim, &rec.tissue_id)?;
        sim += start.elapsed().as_secs_f64();
        let s = StimulusEncoding::new(&rec.stimulus, ops.finest_nodes(), ckpt.model.arch.stimulus_timing)?;
        let start = Instant::now();
        predict_from(&ckpt.model, &ops, &s, &embedding, 1, ckpt.model.arch.frames, 0)?;
        roll += start.elapsed().as_secs_f64();
    }
    let (simulate_seconds, rollout_seconds) = (sim / n as f64, roll / n as f64);
    Ok(Timing { simulate_seconds, rollout_seconds, embed_seconds, speedup: simulate_seconds / rollout_seconds })
}

fn stage_eval(config: &ExperimentConfig, root: &Path) -> Result<Vec<PathBuf>> {
    let (bank, hier) = load_dataset(root)?;
    let ckpt = load_model(&meta_run_dir(root, 0), Stage::Train)?;
    let ops = ckpt.model.graph_ops(&hier);
    let method = MetaPersonalizer { name: META_MODEL.into(), model: &ckpt.model, ops: &ops, samples: config.eval.samples };
    let choices = context_choices(config, &bank)?;
    let ev = evaluate(&method, &bank, &choices, &[Split::Context, Split::Target], seed::derive(config.seed, "eval"))?;
    let dir = Stage::Eval.dir(root);
    write_metrics(&dir, &ev.rows)?;
    let timing = measure_timing(&ckpt, &bank, &hier, config.eval.context_size, 10)?;
    let mut w = csv::Writer::from_path(dir.join(TIMING_FILE)).map_err(|e| Error::Format(e.to_string()))?;
    w.serialize(timing).map_err(|e| Error::Format(e.to_string()))?;
    w.flush()?;
    let mut artifacts = vec![dir.join(crate::eval::METRICS_FILE), dir.join(TIMING_FILE)];
    artifacts.extend(save_predictions(root, &bank, META_MODEL, &ev)?);
    Ok(artifacts)
}

pub fn read_timing(root: &Path) -> Result<Timing> {
    let path = Stage::Eval.dir(root).join(TIMING_FILE);
    if !path.exists() {
        return Err(missing(Stage::Eval, path));
    }
    let mut r = csv::Reader::from_path(&path).map_err(|e| Error::Format(e.to_string()))?;
    r.deserialize()
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?
        .map_err(|e| Error::Format(e.to_string()))
}

fn stage_sweep(config: &ExperimentConfig, root: &Path) -> Result<Vec<PathBuf>> {
    let (bank, hier) = load_dataset(root)?;
    let ckpt = load_model(&meta_run_dir(root, 0), Stage::Train)?;
    let ops = ckpt.model.graph_ops(&hier);
    let method = MetaPersonalizer { name: META_MODEL.into(), model: &ckpt.model, ops: &ops, samples: config.eval.samples };
    let choices = context_choices(config, &bank)?;
    let rows = context_sweep(&method, &bank, &choices, &config.eval.sweep, seed::derive(config.seed, "eval"))?;
    let dir = Stage::Sweep.dir(root);
    write_metrics(&dir, &rows)?;
    Ok(vec![dir.join(crate::eval::METRICS_FILE)])
}

fn stage_baselines(config: &ExperimentConfig, root: &Path) -> Result<Vec<PathBuf>> {
    let (bank, hier) = load_dataset(root)?;
    let choices = context_choices(config, &bank)?;
    let eval_seed = seed::derive(config.seed, "eval");
    let dir = Stage::Baselines.dir(root);
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut artifacts = Vec::new();
    let mut score = |method: &dyn Personalizer, name: &str, artifacts: &mut Vec<PathBuf>| -> Result<()> {
        let ev = evaluate(method, &bank, &choices, &[Split::Context, Split::Target], eval_seed)?;
        artifacts.extend(save_predictions(root, &bank, name, &ev)?);
        rows.extend(ev.rows);
        Ok(())
    };
    if config.baselines.pns {
        let run = pns_run_dir(root);
        artifacts.extend(train_run(&bank, &hier, &config.arch, &pns_train_config(config), &run)?);
        let ckpt = load_model(&run, Stage::Baselines)?;
        let ops = ckpt.model.graph_ops(&hier);
        let method = PnsPersonalizer { name: PNS_MODEL.into(), model: &ckpt.model, ops: &ops, samples: config.eval.samples };
        score(&method, PNS_MODEL, &mut artifacts)?;
    }
    if config.baselines.bo {
        let partition = segment_partition(&hier, config.baselines.segments, seed::derive(config.seed, "segments"))?;
        fs::create_dir_all(&dir)?;
        let seg_path = dir.join("segments.json");
        fs::write(&seg_path, serde_json::to_string(&partition).map_err(|e| Error::Format(e.to_string()))?)?;
        artifacts.push(seg_path);
        let bo_config = crate::baselines::BoConfig { seed: seed::derive(config.seed, "bo"), ..config.baselines.bo_config };
        let method =
            BoPersonalizer { name: BO_MODEL.into(), hier: &hier, sim: bank.sim, partition, config: bo_config };
        score(&method, BO_MODEL, &mut artifacts)?;
    }
    write_metrics(&dir, &rows)?;
    artifacts.push(dir.join(crate::eval::METRICS_FILE));
    Ok(artifacts)
}

/// Loads a stored prediction array.
pub fn load_prediction(root: &Path, subject: &str, model: &str) -> Result<Option<Mat>> {
    let path = prediction_dir(root).join(format!("{subject}_{model}.pnsa"));
    if !path.exists() {
        return Ok(None);
    }
    arrayio::load(&path).map(Some)
}
