use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a trainable tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

/// Owns every trainable tensor of a model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Named, shape-tagged parameter blob as persisted in model artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
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

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds gradients returned by a backward pass into the parameter grads.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in &grads.0 {
            self.tensors[id.0].accumulate_grad(g);
        }
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites parameter values from persisted blobs; names and shapes
    /// must match the freshly built architecture exactly.
    pub fn load_named(&mut self, blobs: &[NamedTensor]) -> Result<()> {
        if blobs.len() != self.tensors.len() {
            return Err(Error::Artifact(format!(
                "expected {} parameter tensors, found {}",
                self.tensors.len(),
                blobs.len()
            )));
        }
        for ((name, t), blob) in self.names.iter().zip(&mut self.tensors).zip(blobs) {
            if *name != blob.name || t.shape() != blob.shape.as_slice() {
                return Err(Error::Artifact(format!(
                    "parameter {name} {:?} does not match stored {} {:?}",
                    t.shape(),
                    blob.name,
                    blob.shape
                )));
            }
            *t = Tensor::new(blob.shape.clone(), blob.data.clone())?;
        }
        Ok(())
    }
}

/// Per-parameter gradients produced by [`super::Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients(pub(crate) Vec<(ParamId, Vec<f64>)>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }
}
