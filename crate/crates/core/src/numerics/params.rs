use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors, in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

/// On-disk form of one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Toggles `requires_grad` for every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, on: bool) {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if name.starts_with(prefix) {
                t.set_requires_grad(on);
            }
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites values from `named`. Names and shapes must match this store exactly.
    pub fn load_named(&mut self, named: &[NamedTensor]) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::data(format!(
                "checkpoint holds {} tensors, model expects {}",
                named.len(),
                self.tensors.len()
            )));
        }
        for nt in named {
            let id = self
                .id(&nt.name)
                .ok_or_else(|| Error::data(format!("unexpected tensor `{}` in checkpoint", nt.name)))?;
            let t = &mut self.tensors[id.0];
            if t.shape() != nt.shape.as_slice() {
                return Err(Error::data(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    nt.name,
                    nt.shape,
                    t.shape()
                )));
            }
            if nt.values.len() != t.numel() {
                return Err(Error::data(format!(
                    "tensor `{}` has {} values for shape {:?}",
                    nt.name,
                    nt.values.len(),
                    nt.shape
                )));
            }
            if nt.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!("tensor `{}` holds non-finite values", nt.name)));
            }
            t.data_mut().copy_from_slice(&nt.values);
        }
        Ok(())
    }

    pub fn to_named_prefix(&self, prefix: &str) -> Vec<NamedTensor> {
        self.to_named()
            .into_iter()
            .filter(|t| t.name.starts_with(prefix))
            .collect()
    }

    /// Loads exactly the parameters whose names start with `prefix`; every
    /// such parameter must be present in `named` with a matching shape.
    pub fn load_named_prefix(&mut self, named: &[NamedTensor], prefix: &str) -> Result<()> {
        let mut sub = ParamStore::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            if name.starts_with(prefix) {
                sub.add(name.clone(), Tensor::zeros(t.shape()))?;
            }
        }
        let named: Vec<NamedTensor> = named.iter().filter(|t| t.name.starts_with(prefix)).cloned().collect();
        sub.load_named(&named)?;
        self.copy_matching_from(&sub)?;
        Ok(())
    }

    /// Copies values for every name present in both stores; returns how many were copied.
    pub fn copy_matching_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for (name, &i) in &self.index {
            if let Some(src) = other.id(name) {
                let src = other.get(src);
                let dst = &mut self.tensors[i];
                if src.shape() != dst.shape() {
                    return Err(Error::data(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        src.shape(),
                        dst.shape()
                    )));
                }
                dst.data_mut().copy_from_slice(src.data());
                copied += 1;
            }
        }
        Ok(copied)
    }
}
