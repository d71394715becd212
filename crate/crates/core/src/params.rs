//! Named parameter storage shared by every model.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Enters the forward pass but never changes (e.g. the output threshold).
    Frozen,
    /// Non-differentiable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Per-counts summary of a store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub frozen: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, kind });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.kind == ParamKind::Trainable).map(|(id, _)| id).collect()
    }

    pub fn count(&self) -> ParamCount {
        let mut c = ParamCount::default();
        for p in &self.params {
            match p.kind {
                ParamKind::Trainable => c.trainable += p.value.len(),
                ParamKind::Frozen => c.frozen += p.value.len(),
                ParamKind::Buffer => {}
            }
        }
        c
    }

    /// Registers every parameter on `tape`; trainable ones require grad.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), p.kind == ParamKind::Trainable))
            .collect();
        Bound { vars }
    }

    /// Named tensors, in registration order, for checkpointing.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    /// Overwrites values from named tensors; every stored name must be present
    /// with a matching shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::config(format!("checkpoint lacks tensor '{}'", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::dim(
                    "load_checkpoint",
                    format!("tensor '{}' has shape {:?}, model expects {:?}", p.name, t.shape(), p.value.shape()),
                ));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Tape handles for one forward pass, indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients of trainable parameters after `tape.backward`; parameters
    /// the loss did not reach get zeros.
    pub fn grads(&self, tape: &Tape, store: &ParamStore) -> Vec<(ParamId, Tensor)> {
        store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let g = tape.grad(self.var(id)).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
                (id, g)
            })
            .collect()
    }
}
