use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::TissueField;
use super::observe::{observe, sensor_layout, Observation};
use super::simulate::{simulate, stimulus_at, SimParams, SimulationRecord, Stimulus};
use crate::arrayio::{self, Dtype};
use crate::error::{Error, Result};
use crate::geometry::{GraphHierarchy, GraphLevel};
use crate::seed;

const MANIFEST: &str = "manifest.toml";
const HIERARCHY: &str = "hierarchy.json";
const FORMAT_VERSION: u32 = 1;

/// A geodesic ball of raised excitability threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScarRegion {
    pub center: usize,
    /// Geodesic radius in mm.
    pub radius: f64,
    pub excitability: f64,
}

/// One tissue setting, i.e. one subject. No regions means healthy tissue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScarConfig {
    pub name: String,
    #[serde(default)]
    pub regions: Vec<ScarRegion>,
}

impl ScarConfig {
    pub fn healthy(name: &str) -> Self {
        Self { name: name.to_string(), regions: Vec::new() }
    }

    pub fn tissue(&self, level: &GraphLevel, a_healthy: f64) -> Result<TissueField> {
        let mut a = vec![a_healthy; level.node_count];
        for r in &self.regions {
            if r.center >= level.node_count {
                return Err(Error::Config(format!("scar center {} outside mesh", r.center)));
            }
            for (i, d) in level.geodesic_distances(r.center).into_iter().enumerate() {
                if d <= r.radius {
                    a[i] = a[i].max(r.excitability);
                }
            }
        }
        TissueField::from_excitability(a, a_healthy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StimulusSpec {
    pub onset: f64,
    pub duration: f64,
    pub amplitude: f64,
}

impl Default for StimulusSpec {
    fn default() -> Self {
        Self { onset: 0.0, duration: 1.0, amplitude: 0.5 }
    }
}

/// Sensor layout and measurement noise shared by every subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSpec {
    pub nodes: Vec<usize>,
    pub noise_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub key: String,
    pub tissue: TissueField,
    pub records: Vec<SimulationRecord>,
    /// `observations[i]` is the sensor recording of `records[i]`.
    pub observations: Vec<Observation>,
}

impl Subject {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectBank {
    pub mesh_id: String,
    pub sim: SimParams,
    pub sensor_nodes: Vec<usize>,
    pub subjects: Vec<Subject>,
}

impl SubjectBank {
    pub fn record_count(&self) -> usize {
        self.subjects.iter().map(Subject::len).sum()
    }

    pub fn subject(&self, key: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.key == key)
    }
}

/// Simulates every (subject, origin) pair and records its observation.
///
/// Simulations run on the rayon pool; results are collected in
/// (subject, origin) order, so the bank does not depend on the worker count.
pub fn make_subject_bank(
    hier: &GraphHierarchy,
    scar_configs: &[ScarConfig],
    stim_origins: &[usize],
    stim: StimulusSpec,
    sim: &SimParams,
    sensors: &SensorSpec,
) -> Result<SubjectBank> {
    if scar_configs.is_empty() {
        return Err(Error::Config("need at least one scar config".into()));
    }
    if stim_origins.len() < 2 {
        return Err(Error::Config("need at least two stimulation origins".into()));
    }
    let level = hier.finest();
    let tissues: Vec<TissueField> = scar_configs
        .iter()
        .map(|c| c.tissue(level, sim.ap.a_healthy))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..scar_configs.len())
        .flat_map(|s| (0..stim_origins.len()).map(move |o| (s, o)))
        .collect();
    let results: Vec<Result<(SimulationRecord, Observation)>> = jobs
        .par_iter()
        .map(|&(s, o)| {
            let stimulus = stimulus_at(hier, stim_origins[o], stim.onset, stim.duration, stim.amplitude);
            let name = &scar_configs[s].name;
            let wrap = |e: Error| Error::Dataset { subject: name.clone(), origin: stim_origins[o], source: Box::new(e) };
            let record = simulate(hier, &tissues[s], &stimulus, sim, name).map_err(wrap)?;
            let noise_seed = seed::derive_index(seed::derive_index(sensors.seed, s as u64), o as u64);
            let obs = observe(&record, &sensors.nodes, sensors.noise_std, noise_seed).map_err(wrap)?;
            Ok((record, obs))
        })
        .collect();

    let mut results = results.into_iter();
    let mut subjects = Vec::with_capacity(scar_configs.len());
    for (cfg, tissue) in scar_configs.iter().zip(tissues) {
        let mut records = Vec::with_capacity(stim_origins.len());
        let mut observations = Vec::with_capacity(stim_origins.len());
        for _ in stim_origins {
            let (r, o) = results.next().expect("one result per job")?;
            records.push(r);
            observations.push(o);
        }
        subjects.push(Subject { key: cfg.name.clone(), tissue, records, observations });
    }
    Ok(SubjectBank { mesh_id: hier.mesh_id.clone(), sim: *sim, sensor_nodes: sensors.nodes.clone(), subjects })
}

/// Complete description of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub subjects: Vec<ScarConfig>,
    /// Number of distinct stimulation origins per subject (sampled from the seed).
    pub origins: usize,
    pub sensors: usize,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub stimulus: StimulusSpec,
    #[serde(default)]
    pub sim: SimParams,
}

impl DatasetSpec {
    /// Four subjects (one healthy, three scars) on the 14×14 sheet, 25 origins each.
    pub fn desk() -> Self {
        let region = |center, radius, excitability| ScarRegion { center, radius, excitability };
        Self {
            subjects: vec![
                ScarConfig::healthy("healthy"),
                ScarConfig { name: "scar_block".into(), regions: vec![region(14 * 9 + 4, 2.5, 0.5)] },
                ScarConfig { name: "scar_slow".into(), regions: vec![region(14 * 4 + 9, 2.5, 0.2)] },
                ScarConfig {
                    name: "scar_double".into(),
                    regions: vec![region(14 * 3 + 3, 1.5, 0.5), region(14 * 10 + 10, 2.0, 0.5)],
                },
            ],
            origins: 25,
            sensors: 49,
            noise_std: 0.0,
            stimulus: StimulusSpec::default(),
            sim: SimParams::default(),
        }
    }

    pub fn origin_nodes(&self, hier: &GraphHierarchy, seed: u64) -> Result<Vec<usize>> {
        let n = hier.finest().node_count;
        if self.origins > n {
            return Err(Error::Config(format!("{} origins requested on {n} nodes", self.origins)));
        }
        let mut rng = seed::rng(seed::derive(seed, "origins"));
        let mut nodes = sample(&mut rng, n, self.origins).into_vec();
        nodes.sort_unstable();
        Ok(nodes)
    }

    pub fn generate(&self, hier: &GraphHierarchy, seed: u64) -> Result<SubjectBank> {
        let origins = self.origin_nodes(hier, seed)?;
        let sensors = SensorSpec {
            nodes: sensor_layout(hier.finest(), self.sensors),
            noise_std: self.noise_std,
            seed: seed::derive(seed, "noise"),
        };
        make_subject_bank(hier, &self.subjects, &origins, self.stimulus, &self.sim, &sensors)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    mesh_id: String,
    dt: f64,
    sim: SimParams,
    sensor_nodes: Vec<usize>,
    subjects: Vec<SubjectEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectEntry {
    key: String,
    tissue: String,
    records: Vec<RecordEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordEntry {
    x: String,
    y: String,
    noise_std: f64,
    stimulus: Stimulus,
}

impl SubjectBank {
    /// Writes the dataset container: `manifest.toml`, `hierarchy.json` and one
    /// float32 array per record and observation under `arrays/`.
    pub fn save(&self, dir: &Path, hier: &GraphHierarchy) -> Result<()> {
        let arrays = dir.join("arrays");
        fs::create_dir_all(&arrays)?;
        let mut subjects = Vec::new();
        for (s, subject) in self.subjects.iter().enumerate() {
            let tissue = format!("arrays/s{s:02}_tissue.pnsa");
            let a = ndarray::Array2::from_shape_vec((1, subject.tissue.len()), subject.tissue.excitability.clone())
                .expect("row vector");
            arrayio::save(&dir.join(&tissue), &a, Dtype::F64)?;
            let mut records = Vec::new();
            for (r, (rec, obs)) in subject.records.iter().zip(&subject.observations).enumerate() {
                let x = format!("arrays/s{s:02}_r{r:03}_x.pnsa");
                let y = format!("arrays/s{s:02}_r{r:03}_y.pnsa");
                arrayio::save(&dir.join(&x), &rec.x, Dtype::F32)?;
                arrayio::save(&dir.join(&y), &obs.y, Dtype::F32)?;
                records.push(RecordEntry { x, y, noise_std: obs.noise_std, stimulus: rec.stimulus.clone() });
            }
            subjects.push(SubjectEntry { key: subject.key.clone(), tissue, records });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            mesh_id: self.mesh_id.clone(),
            dt: self.sim.frame_interval(),
            sim: self.sim,
            sensor_nodes: self.sensor_nodes.clone(),
            subjects,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(MANIFEST), text)?;
        let hier_json = serde_json::to_string(hier).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(HIERARCHY), hier_json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, GraphHierarchy)> {
        let manifest_path = dir.join(MANIFEST);
        if !manifest_path.exists() {
            return Err(Error::MissingArtifact { stage: "dataset".into(), path: manifest_path });
        }
        let manifest: Manifest =
            toml::from_str(&fs::read_to_string(&manifest_path)?).map_err(|e| Error::Format(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("dataset format {} unsupported", manifest.format_version)));
        }
        let hier: GraphHierarchy = serde_json::from_str(&fs::read_to_string(dir.join(HIERARCHY))?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let healthy = manifest.sim.ap.a_healthy;
        let mut subjects = Vec::new();
        for entry in manifest.subjects {
            let a = arrayio::load(&dir.join(&entry.tissue))?;
            let tissue = TissueField::from_excitability(a.iter().copied().collect(), healthy)?;
            let mut records = Vec::new();
            let mut observations = Vec::new();
            for r in entry.records {
                let x = arrayio::load(&dir.join(&r.x))?;
                let y = arrayio::load(&dir.join(&r.y))?;
                records.push(SimulationRecord {
                    x,
                    dt: manifest.dt,
                    stimulus: r.stimulus,
                    tissue_id: entry.key.clone(),
                    mesh_id: manifest.mesh_id.clone(),
                });
                observations.push(Observation { y, sensor_nodes: manifest.sensor_nodes.clone(), noise_std: r.noise_std });
            }
            subjects.push(Subject { key: entry.key, tissue, records, observations });
        }
        let bank = SubjectBank { mesh_id: manifest.mesh_id, sim: manifest.sim, sensor_nodes: manifest.sensor_nodes, subjects };
        Ok((bank, hier))
    }
}
