use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numkit::{RngStream, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::ones(shape))
    }

    /// Gaussian init with standard deviation `std`.
    pub fn normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut RngStream,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Copies values from `other` for every name present in both stores.
    /// Shapes must agree for shared names.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut loaded = 0;
        for (_, name, value) in other.iter() {
            if let Some(id) = self.id(name) {
                if self.values[id.0].shape() != value.shape() {
                    return Err(Error::contract(format!(
                        "parameter {name}: shape {:?} does not match stored {:?}",
                        self.values[id.0].shape(),
                        value.shape()
                    )));
                }
                self.values[id.0] = value.clone();
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    /// Records every parameter on `tape`; `trainable` decides which carry gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamId, &str) -> bool) -> Bound {
        let vars = self
            .iter()
            .map(|(id, name, v)| {
                if trainable(id, name) {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn bind_all(&self, tape: &mut Tape) -> Bound {
        self.bind(tape, |_, _| true)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind(tape, |_, _| false)
    }
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
