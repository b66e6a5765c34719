//! Named, seeded parameter storage.

use std::collections::{BTreeMap, HashMap};

use guidnoise_tensor::Tensor;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    FanIn(usize),
}

/// Handle to one entry of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Every learnable tensor, keyed by a dotted path such as `enc.l1.block.conv1.weight`.
///
/// Layers keep [`ParamId`]s and look tensors up at forward time, so replacing
/// an entry (an optimizer step, a checkpoint load) is seen by the next pass.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn create(&mut self, name: String, shape: &[usize], init: Init, rng: &mut SeededRng) -> Result<ParamId> {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f32).sqrt();
                (0..n).map(|_| (rng.uniform() * 2.0 - 1.0) * bound).collect()
            }
        };
        let id = self.tensors.len();
        self.tensors.push(Tensor::param(data, shape)?);
        self.names.push(name.clone());
        self.index.insert(name, id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    /// Parameters in creation order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Replaces parameter `i` (creation order) with `data`.
    pub fn update(&mut self, i: usize, data: Vec<f32>) -> Result<()> {
        let shape = self.tensors[i].shape().to_vec();
        self.tensors[i] = Tensor::param(data, &shape)?;
        Ok(())
    }

    pub fn set(&mut self, name: &str, data: Vec<f32>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if data.len() != self.tensors[i].numel() {
            return Err(Error::shape(self.tensors[i].numel(), data.len()));
        }
        self.update(i, data)
    }

    /// Snapshot of every parameter as flat f32 data plus shape.
    pub fn export(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        self.iter().map(|(k, t)| (k.to_string(), t.shape().to_vec(), t.to_vec())).collect()
    }

    /// Overwrites parameters. Every stored name must be present with a matching shape.
    pub fn import(&mut self, tensors: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let (shape, _) = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if shape.as_slice() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {shape:?}, expected {:?}",
                    self.tensors[i].shape()
                )));
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !self.index.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unknown parameter {extra}")));
        }
        for i in 0..self.names.len() {
            let (_, data) = &tensors[&self.names[i]];
            self.update(i, data.clone())?;
        }
        Ok(())
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) -> Result<()> {
        for i in 0..self.tensors.len() {
            let n = self.tensors[i].numel();
            self.update(i, vec![0.0; n])?;
        }
        Ok(())
    }
}

/// Builder handle that prefixes names.
pub(crate) struct Scope<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut SeededRng,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn root(store: &'a mut ParamStore, rng: &'a mut SeededRng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, shape, init, self.rng)
    }
}
