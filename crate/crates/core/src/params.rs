//! Named parameter storage shared by the model and the optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CssError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Image encoder, compositors, projectors, prototypes.
    Main,
    /// Text encoder, trained at its own (smaller) rate.
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    #[serde(skip)]
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        id
    }

    /// Gaussian-initialized parameter.
    pub fn normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("non-negative std");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        let value = Tensor::new(shape.to_vec(), data).expect("shape");
        self.insert(name, group, value)
    }

    /// Dense layer weight `[fan_in, fan_out]` with He-normal init.
    pub fn linear_weight<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        self.normal(name, group, &[fan_in, fan_out], (2.0 / fan_in as f64).sqrt(), rng)
    }

    pub fn bias(&mut self, name: impl Into<String>, group: ParamGroup, width: usize) -> ParamId {
        self.insert(name, group, Tensor::zeros(&[width]))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Rebuilds the name index after deserialization.
    pub fn reindex(&mut self) -> Result<()> {
        self.index.clear();
        for (i, p) in self.params.iter().enumerate() {
            if self.index.insert(p.name.clone(), ParamId(i)).is_some() {
                return Err(CssError::contract(format!("duplicate parameter {}", p.name)));
            }
        }
        Ok(())
    }
}
