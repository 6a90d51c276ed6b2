use rand::seq::index::sample;
use rand::Rng;

use crate::epsim::{SimulationRecord, Subject};
use crate::error::{Error, Result};
use crate::metainfer::ContextSet;

/// One subject's split into context observations and generation targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub subject: String,
    pub context: ContextSet,
    /// Record indices of the context items, in context order.
    pub context_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub context_records: Vec<SimulationRecord>,
    pub targets: Vec<SimulationRecord>,
}

impl Episode {
    /// `D_x`: the context records followed by the targets.
    pub fn generation_set(&self) -> Vec<&SimulationRecord> {
        self.context_records.iter().chain(&self.targets).collect()
    }

    /// Context of exactly one record's own sparse observation, generating
    /// that same record.
    pub fn paired(subject: &Subject, index: usize) -> Result<Self> {
        let record = subject
            .records
            .get(index)
            .ok_or_else(|| Error::Episode(format!("subject {} has no record {index}", subject.key)))?;
        Ok(Self {
            subject: subject.key.clone(),
            context: ContextSet::new(subject.key.clone(), vec![subject.observations[index].clone()])?,
            context_ids: vec![index],
            target_ids: Vec::new(),
            context_records: vec![record.clone()],
            targets: Vec::new(),
        })
    }

    /// Splits this episode's generation set into one paired episode per record.
    pub fn split_paired(&self, subject: &Subject) -> Result<Vec<Self>> {
        self.context_ids.iter().chain(&self.target_ids).map(|&i| Self::paired(subject, i)).collect()
    }
}

/// Draws up to `origins` records without replacement, then `ν ~ U{1..ν_max}`
/// (capped so at least one target remains); the first `ν` become context.
pub fn sample_episode(subject: &Subject, origins: usize, nu_max: usize, rng: &mut impl Rng) -> Result<Episode> {
    let n = subject.records.len();
    if n < 2 {
        return Err(Error::Episode(format!("subject {} has {n} records, need ≥ 2", subject.key)));
    }
    if nu_max == 0 || origins < 2 {
        return Err(Error::Episode("need ν_max ≥ 1 and ≥ 2 origins per episode".into()));
    }
    let k = origins.min(n);
    let picked = sample(rng, n, k).into_vec();
    let nu = rng.random_range(1..=nu_max.min(k - 1));
    let (ctx, tgt) = picked.split_at(nu);
    Ok(Episode {
        subject: subject.key.clone(),
        context: ContextSet::new(subject.key.clone(), ctx.iter().map(|&i| subject.observations[i].clone()).collect())?,
        context_ids: ctx.to_vec(),
        target_ids: tgt.to_vec(),
        context_records: ctx.iter().map(|&i| subject.records[i].clone()).collect(),
        targets: tgt.iter().map(|&i| subject.records[i].clone()).collect(),
    })
}
