//! Named trainable parameter arrays.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform Glorot initialization for a `fan_in × fan_out` weight.
    pub fn add_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add_uniform(name, (fan_in, fan_out), bound, rng)
    }

    pub fn add_uniform(&mut self, name: &str, shape: (usize, usize), bound: f64, rng: &mut impl Rng) -> ParamId {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let value = Array2::from_shape_simple_fn(shape, || dist.sample(rng));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: &str, shape: (usize, usize)) -> ParamId {
        self.add(name, Array2::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Replaces values by name; every name and shape must match exactly.
    pub fn load(&mut self, named: Vec<(String, Array2<f64>)>) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} arrays, model expects {}",
                named.len(),
                self.values.len()
            )));
        }
        for (name, value) in named {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if self.values[id.0].dim() != value.dim() {
                return Err(Error::Format(format!(
                    "parameter {name}: shape {:?} != {:?}",
                    value.dim(),
                    self.values[id.0].dim()
                )));
            }
            self.values[id.0] = value;
        }
        Ok(())
    }
}
