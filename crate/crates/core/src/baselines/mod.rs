//! Comparison methods: the surrogate conditioned on one sequence at a time
//! (no set aggregation), and segment-wise excitability calibrated by Bayesian
//! optimization against the simulator.

mod bo;
mod segments;

pub use bo::{
    bo_fit, bo_minimize, bo_predict, expected_improvement, tissue_from, BoConfig, BoFit, BoPersonalizer, BoState,
    Bounds, CalibrationObjective, GpHyper,
};
pub use segments::{kmeans_partition, segment_partition, SegmentPartition};

use crate::autodiff::Mat;
use crate::epsim::{Observation, Stimulus};
use crate::error::Result;
use crate::eval::{predict_surrogate, Item, Personalized, Personalizer};
use crate::metainfer::{posterior, ContextSet, SetEmbedding};
use crate::model::Model;
use crate::nn::GraphOps;

/// `q(c | y₁:T)` of a single sequence.
pub fn pns_infer(model: &Model, ops: &GraphOps, obs: &Observation) -> Result<SetEmbedding> {
    posterior(model, ops, &ContextSet::new("single", vec![obs.clone()])?, None)
}

/// Each context record is predicted from its own embedding; target `j` borrows
/// the embedding of context record `j mod ν`.
pub struct PnsPersonalizer<'m> {
    pub name: String,
    pub model: &'m Model,
    pub ops: &'m GraphOps,
    pub samples: usize,
}

struct PnsPredictor<'m> {
    owner: &'m PnsPersonalizer<'m>,
    embeddings: Vec<SetEmbedding>,
}

impl Personalizer for PnsPersonalizer<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn rollouts_per_prediction(&self) -> usize {
        self.samples
    }

    fn personalize<'a>(&'a self, _: usize, context: &ContextSet, _: &[Stimulus]) -> Result<Box<dyn Personalized + 'a>> {
        let embeddings = context.items.iter().map(|o| pns_infer(self.model, self.ops, o)).collect::<Result<_>>()?;
        Ok(Box::new(PnsPredictor { owner: self, embeddings }))
    }
}

impl Personalized for PnsPredictor<'_> {
    fn predict(&self, item: Item, stimulus: &Stimulus, seed: u64) -> Result<Mat> {
        let k = self.embeddings.len();
        let e = match item {
            Item::Context(i) => &self.embeddings[i],
            Item::Target(j) => &self.embeddings[j % k],
        };
        let o = self.owner;
        predict_surrogate(o.model, o.ops, stimulus, e, o.samples, seed)
    }
}
