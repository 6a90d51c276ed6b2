use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::BoConfig;
use crate::epsim::DatasetSpec;
use crate::error::{Error, Result};
use crate::geometry::{build_hierarchy, GraphHierarchy, MeshGeometry, DEFAULT_LEVELS, DEFAULT_RATIO};
use crate::model::ArchConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MeshSpec {
    Grid { nx: usize, ny: usize, spacing: f64 },
    Icosphere { subdivisions: usize, radius: f64 },
    File { path: PathBuf },
}

impl MeshSpec {
    pub fn build(&self) -> Result<MeshGeometry> {
        let mesh = match self {
            MeshSpec::Grid { nx, ny, spacing } => MeshGeometry::grid(*nx, *ny, *spacing),
            MeshSpec::Icosphere { subdivisions, radius } => MeshGeometry::icosphere(*subdivisions, *radius),
            MeshSpec::File { path } => MeshGeometry::read(path)?,
        };
        mesh.validate()?;
        Ok(mesh)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchySpec {
    pub levels: usize,
    pub ratio: f64,
}

impl Default for HierarchySpec {
    fn default() -> Self {
        Self { levels: DEFAULT_LEVELS, ratio: DEFAULT_RATIO }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Records per context set; the sweep takes nested prefixes of these sets.
    pub context_size: usize,
    pub sets_per_subject: usize,
    /// Reparameterized rollouts averaged into each prediction.
    pub samples: usize,
    pub sweep: Vec<usize>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { context_size: 5, sets_per_subject: 1, samples: 4, sweep: vec![5, 4, 3, 2, 1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSpec {
    pub pns: bool,
    pub bo: bool,
    pub segments: usize,
    pub bo_config: BoConfig,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self { pns: true, bo: true, segments: 7, bo_config: BoConfig::default() }
    }
}

/// Everything a pipeline run depends on besides the code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Root of every random stream; stage seeds are derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Independent meta-training runs; run 0 is the one evaluated.
    #[serde(default = "default_runs")]
    pub runs: usize,
    pub mesh: MeshSpec,
    #[serde(default)]
    pub hierarchy: HierarchySpec,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub arch: ArchConfig,
    /// Meta-training settings; `mode` and `seed` are set per run by the pipeline.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub baselines: BaselineSpec,
}

fn default_runs() -> usize {
    1
}

impl ExperimentConfig {
    /// Four subjects on the 14×14 sheet, three meta-training seeds, both baselines.
    pub fn desk(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            name: "desk".into(),
            seed: 0,
            out_dir: out_dir.into(),
            runs: 3,
            mesh: MeshSpec::Grid { nx: 14, ny: 14, spacing: 1.0 },
            hierarchy: HierarchySpec::default(),
            dataset: DatasetSpec::desk(),
            arch: ArchConfig { hidden: 16, ..ArchConfig::default() },
            train: TrainConfig::default(),
            eval: EvalSpec::default(),
            baselines: BaselineSpec::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        if self.runs == 0 {
            return Err(Error::Config("runs must be ≥ 1".into()));
        }
        if self.hierarchy.levels < 2 || !(self.hierarchy.ratio > 0.0 && self.hierarchy.ratio < 1.0) {
            return Err(Error::Config(format!("bad hierarchy {:?}", self.hierarchy)));
        }
        if self.dataset.sim.frames != self.arch.frames {
            return Err(Error::Config(format!(
                "simulated frames {} differ from arch.frames {}",
                self.dataset.sim.frames, self.arch.frames
            )));
        }
        let e = &self.eval;
        if e.context_size == 0 || e.context_size >= self.dataset.origins || e.samples == 0 || e.sets_per_subject == 0 {
            return Err(Error::Config(format!("bad eval spec {e:?}")));
        }
        if let Some(&nu) = e.sweep.iter().find(|&&nu| nu == 0 || nu > e.context_size) {
            return Err(Error::Config(format!("sweep size {nu} outside 1..={}", e.context_size)));
        }
        if self.baselines.bo && self.baselines.segments == 0 {
            return Err(Error::Config("baselines.segments must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn hierarchy(&self) -> Result<GraphHierarchy> {
        let mesh = self.mesh.build()?;
        build_hierarchy(&mesh, self.hierarchy.levels, self.hierarchy.ratio, crate::seed::derive(self.seed, "hierarchy"))
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

/// SHA-256 of the JSON encoding, hex.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config values serialize");
    hex::encode(Sha256::digest(bytes))
}
