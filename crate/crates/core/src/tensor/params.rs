use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{Result, Tensor, TensorError};

/// A named model weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    /// Whether AdamW applies decoupled weight decay to this parameter.
    pub decay: bool,
}

/// Ordered, name-unique collection of parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            trainable: false,
            decay,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        Ok(&self.params[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        let id = self.id(name)?;
        Ok(&mut self.params[id])
    }

    pub fn by_id(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Marks a parameter trainable or frozen. Freezing drops any stored gradient.
    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self.get_mut(name)?;
        p.trainable = trainable;
        p.tensor.requires_grad = trainable;
        if !trainable {
            p.tensor.grad = None;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }

    /// SHA-256 over the names and value bytes of every frozen parameter.
    pub fn frozen_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| !p.trainable) {
            hasher.update((p.name.len() as u64).to_le_bytes());
            hasher.update(p.name.as_bytes());
            hasher.update(p.tensor.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Names of parameters whose value bytes differ from `before`.
    pub fn changed_since(&self, before: &ParamStore) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| match before.get(&p.name) {
                Ok(old) => !bit_equal(old.tensor.data(), p.tensor.data()),
                Err(_) => true,
            })
            .map(|p| p.name.clone())
            .collect()
    }
}

fn bit_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
