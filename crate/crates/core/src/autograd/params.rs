use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by the optimizer and counted as a model parameter.
    Learnable,
    /// Persistent state such as batch-norm running statistics.
    Buffer,
}

/// A named tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T = f64> {
    pub name: String,
    pub kind: ParamKind,
    pub(crate) value: Arc<Tensor<T>>,
    pub(crate) grad: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }
}

/// Ordered registry of parameters addressed by [`ParamId`] or hierarchical name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f64> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter {
            name: name.clone(),
            kind,
            value: Arc::new(value),
            grad,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.params[id.0].value)
    }

    /// Mutable access to a value; copies it first if a live tape still shares it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn learnable(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.iter().filter(|(_, p)| p.kind == ParamKind::Learnable)
    }

    /// Number of learnable scalars.
    pub fn learnable_count(&self) -> usize {
        self.learnable().map(|(_, p)| p.value.len()).sum()
    }

    /// Total number of learnable scalars whose gradient is finite.
    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.all_finite())
    }

    /// `(name, value)` pairs in registration order, widened to double precision.
    pub fn records(&self) -> Vec<(String, Tensor<f64>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.cast())).collect()
    }

    /// Overwrites values from `(name, tensor)` records. Every parameter must be
    /// present with a matching shape; unknown names are rejected.
    pub fn load_records(&mut self, records: &[(String, Tensor<f64>)]) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, tensor) in records {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Validation(format!("checkpoint record {name} has no matching parameter")))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != tensor.shape() {
                return Err(Error::Validation(format!(
                    "checkpoint record {name} has shape {:?}, network expects {:?}",
                    tensor.shape(),
                    p.value.shape()
                )));
            }
            p.value = Arc::new(tensor.cast());
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!(
                "checkpoint lacks parameter {}",
                self.params[missing].name
            )));
        }
        Ok(())
    }
}
