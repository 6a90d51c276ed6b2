//! Architecture configuration and the combined parameter container shared by
//! the surrogate and the meta-model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GraphHierarchy;
use crate::metainfer::MetaEncoder;
use crate::nn::GraphOps;
use crate::params::ParamSet;
use crate::seed;
use crate::surrogate::Surrogate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Channel width of every graph block.
    pub hidden: usize,
    /// `d_z`, per coarse node.
    pub latent_dim: usize,
    /// `d_c`.
    pub cond_dim: usize,
    /// Spline control points per edge-attribute axis.
    pub kernel_size: usize,
    pub blocks: usize,
    /// Hidden width of the recurrent sequence encoder.
    pub gru_hidden: usize,
    /// Width after compressing the recurrent states across time.
    pub time_hidden: usize,
    /// Sequence length the meta-encoder accepts.
    pub frames: usize,
    /// Appends onset and duration channels to the stimulus encoding.
    pub stimulus_timing: bool,
    /// Lower bound added to the softplus scale head.
    pub sigma_floor: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            latent_dim: 16,
            cond_dim: 16,
            kernel_size: 2,
            blocks: 4,
            gru_hidden: 16,
            time_hidden: 16,
            frames: 40,
            stimulus_timing: false,
            sigma_floor: 1e-4,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("hidden", self.hidden),
            ("latent_dim", self.latent_dim),
            ("cond_dim", self.cond_dim),
            ("gru_hidden", self.gru_hidden),
            ("time_hidden", self.time_hidden),
            ("frames", self.frames),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("arch.{name} must be ≥ 1")));
        }
        if self.kernel_size < 2 {
            return Err(Error::Config("arch.kernel_size must be ≥ 2".into()));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config("arch.sigma_floor must be > 0".into()));
        }
        Ok(())
    }
}

/// Surrogate and meta-encoder over one parameter set.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: ArchConfig,
    pub params: ParamSet,
    pub surrogate: Surrogate,
    pub meta: MetaEncoder,
}

impl Model {
    /// Fresh initialization; parameter shapes depend on the hierarchy's
    /// coarsest node count.
    pub fn new(arch: &ArchConfig, hier: &GraphHierarchy, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::rng(seed);
        let mut params = ParamSet::default();
        let surrogate = Surrogate::new(&mut params, arch, &mut rng);
        let coarse = *hier.node_counts().last().ok_or(Error::TooFewLevels(0))?;
        let meta = MetaEncoder::new(&mut params, arch, coarse, &mut rng);
        Ok(Self { arch: arch.clone(), params, surrogate, meta })
    }

    pub fn graph_ops(&self, hier: &GraphHierarchy) -> GraphOps {
        GraphOps::new(hier, self.arch.kernel_size)
    }
}
