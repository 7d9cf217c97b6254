use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Config(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Overwrites every parameter from `(name, tensor)` records. The record
    /// set must match the store exactly in names and shapes.
    pub fn assign_from(&mut self, records: Vec<(String, Tensor<T>)>) -> Result<()> {
        if records.len() != self.len() {
            return Err(TensorError::Format(format!(
                "checkpoint holds {} tensors, model expects {}",
                records.len(),
                self.len()
            )));
        }
        let mut staged = Vec::with_capacity(records.len());
        for (name, tensor) in records {
            let id = self
                .id(&name)
                .ok_or_else(|| TensorError::Format(format!("unexpected tensor {name}")))?;
            if self.get(id).shape() != tensor.shape() {
                return Err(TensorError::Shape {
                    op: "checkpoint",
                    lhs: self.get(id).shape().to_vec(),
                    rhs: tensor.shape().to_vec(),
                });
            }
            staged.push((id, tensor));
        }
        for (id, tensor) in staged {
            self.values[id.0] = tensor;
        }
        Ok(())
    }
}

/// A tape plus lazily bound parameter leaves.
///
/// Each parameter is copied onto the tape at most once, so every use inside
/// one forward pass shares a node and its gradient accumulates.
pub struct Graph<'s, T> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'s, T: Scalar> Graph<'s, T> {
    /// Graph whose parameter leaves require gradients.
    pub fn new(store: &'s ParamStore<T>, seed: u64) -> Self {
        Self::build(store, seed, true)
    }

    /// Graph for inference; no parameter requires a gradient.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self::build(store, 0, false)
    }

    fn build(store: &'s ParamStore<T>, seed: u64, trainable: bool) -> Self {
        Graph {
            tape: Tape::with_seed(seed),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Per-parameter gradients (None for parameters not reached).
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Vec<T>>> {
        self.bound.iter().map(|b| b.and_then(|v| grads.take(v))).collect()
    }
}
