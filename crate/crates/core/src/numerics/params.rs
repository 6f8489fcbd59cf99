use super::graph::{Graph, Var};
use super::tensor::{Fnv, Tensor};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`Params`] collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    tensor: Tensor,
    decay: bool,
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    entries: Vec<Entry>,
}

/// Graph leaves for a [`Params`] collection, in the same order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps leaves created elsewhere, in [`Params`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    /// Adds a tensor; `decay` marks it as subject to weight decay.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            tensor,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.tensor))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Binds every tensor as a tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.entries.iter().map(|e| g.param(e.tensor.clone())).collect(),
        }
    }

    /// Binds every tensor as a constant (no gradient edges).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| g.constant(e.tensor.clone()))
                .collect(),
        }
    }

    /// Same names, shapes and decay flags.
    pub fn same_layout(&self, other: &Params) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.tensor.shape() == b.tensor.shape() && a.decay == b.decay
            })
    }

    pub fn check_layout(&self, other: &Params, op: &'static str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::shape(op, "parameter layouts differ"))
        }
    }

    pub fn digest(&self) -> u64 {
        let mut h = Fnv::new();
        for e in &self.entries {
            h.write(e.name.as_bytes());
            h.write(&e.tensor.digest().to_le_bytes());
        }
        h.finish()
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: Tensor::zeros(e.tensor.shape()),
                    decay: e.decay,
                })
                .collect(),
        }
    }
}
