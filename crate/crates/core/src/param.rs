//! Named parameter collections with gradient slots.

use std::collections::BTreeMap;
use std::io::Write;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{write_blob, Real, Tensor};

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { name: name.into(), value, grad, trainable }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Stores are told apart on a tape by their tag, so every store that takes
/// part in one forward pass must carry a distinct tag.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    tag: u16,
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new(tag: u16) -> Self {
        Self { tag, params: Vec::new() }
    }

    pub fn tag(&self) -> u16 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.params.push(Parameter::new(name, value, trainable));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over parameter names, shapes, and exact value bits.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            for &e in p.value.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for &x in p.value.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn write_blobs<W: Write>(&self, w: &mut W) -> Result<()> {
        for p in &self.params {
            write_blob(w, &p.name, &p.value)?;
        }
        Ok(())
    }

    /// Replaces every value with the tensor of the same name from `blobs`.
    pub fn load_values(&mut self, blobs: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for p in &mut self.params {
            let t = blobs.get(&p.name).ok_or_else(|| Error::MissingTensor(p.name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "{}: checkpoint shape {:?} != model shape {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

pub fn hex_digest(d: &[u8; 32]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}
