use std::collections::BTreeMap;

use super::Tensor;
use crate::{Error, Result};

/// A named tensor with an optional gradient buffer and a freeze flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Option<Tensor>,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter {
            name: name.into(),
            tensor,
            grad: None,
            frozen: false,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn add_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(buf) => {
                for (a, b) in buf.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                let mut t = Tensor::zeros(self.tensor.shape());
                t.data_mut().copy_from_slice(g);
                self.grad = Some(t);
            }
        }
    }
}

/// Ordered collection of parameters with unique names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a parameter; returns its position. Names must be unique.
    pub fn insert(&mut self, p: Parameter) -> Result<usize> {
        if self.index.contains_key(&p.name) {
            return Err(Error::Contract(format!("duplicate parameter name {}", p.name)));
        }
        let id = self.params.len();
        self.index.insert(p.name.clone(), id);
        self.params.push(p);
        Ok(id)
    }

    pub fn get(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
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

    pub fn numel(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(Parameter::numel).sum()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in &mut self.params {
            p.frozen = frozen;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }
}
