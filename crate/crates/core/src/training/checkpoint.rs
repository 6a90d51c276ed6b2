//! Checkpoint container: `b"PNSCKPT\0"`, version `u32`, header length `u64`,
//! a JSON header, then every parameter as a float64 array followed by the
//! optimizer's first and second moments in the same order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig};
use super::TrainConfig;
use crate::arrayio::{self, Dtype};
use crate::error::{Error, Result};
use crate::geometry::GraphHierarchy;
use crate::model::{ArchConfig, Model};

const MAGIC: &[u8; 8] = b"PNSCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub hierarchy: GraphHierarchy,
    pub train: TrainConfig,
    /// Episodes completed.
    pub episode: usize,
    pub adam: Adam,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    train: TrainConfig,
    episode: usize,
    hierarchy: GraphHierarchy,
    param_names: Vec<String>,
    adam_config: AdamConfig,
    adam_step: u64,
}

impl Checkpoint {
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let header = Header {
            arch: self.model.arch.clone(),
            train: self.train.clone(),
            episode: self.episode,
            hierarchy: self.hierarchy.clone(),
            param_names: self.model.params.names().to_vec(),
            adam_config: self.adam.config,
            adam_step: self.adam.step,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, _, p) in self.model.params.iter() {
            arrayio::write_array(w, p, Dtype::F64)?;
        }
        for a in self.adam.m.iter().chain(&self.adam.v) {
            arrayio::write_array(w, a, Dtype::F64)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let mut json = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
        let mut model = Model::new(&header.arch, &header.hierarchy, 0)?;
        let mut named = Vec::with_capacity(header.param_names.len());
        for name in &header.param_names {
            named.push((name.clone(), arrayio::read_array(r)?));
        }
        model.params.load(named)?;
        let mut adam = Adam::new(header.adam_config, &model.params);
        adam.step = header.adam_step;
        for slot in adam.m.iter_mut().chain(adam.v.iter_mut()) {
            let a = arrayio::read_array(r)?;
            if a.dim() != slot.dim() {
                return Err(Error::Format("optimizer moment shape mismatch".into()));
            }
            *slot = a;
        }
        Ok(Self { model, hierarchy: header.hierarchy, train: header.train, episode: header.episode, adam })
    }

    /// Writes through a temporary file and renames, so a crash never leaves
    /// a truncated checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write(&mut w)?;
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact { stage: "train".into(), path: path.to_path_buf() });
        }
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}
