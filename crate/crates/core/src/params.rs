//! Named parameter storage shared by the backbone, adapter and head.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Backbone,
    Adapter,
    Head,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Backbone, Component::Adapter, Component::Head];

    pub fn tag(self) -> u8 {
        match self {
            Component::Backbone => 0,
            Component::Adapter => 1,
            Component::Head => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.tag() == tag)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Backbone => "backbone",
            Component::Adapter => "adapter",
            Component::Head => "head",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub component: Component,
    pub tensor: Tensor<T>,
}

/// Ordered set of named tensors. Insertion order is the canonical order used
/// by checkpoints and the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

/// Tape handles for every parameter, indexed like the set they came from.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        component: Component,
        tensor: Tensor<T>,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            component,
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn set_trainable(&mut self, component: Component, on: bool) {
        for p in self.params.iter_mut().filter(|p| p.component == component) {
            p.tensor.set_requires_grad(on);
        }
    }

    /// Number of scalars in trainable tensors of the given components.
    pub fn trainable_count(&self, components: &[Component]) -> usize {
        self.params
            .iter()
            .filter(|p| p.tensor.requires_grad() && components.contains(&p.component))
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.params.iter().map(|p| tape.leaf(&p.tensor)).collect())
    }

    /// Adds leaf gradients from `tape` into the parameter tensors.
    pub fn absorb_grads(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        if bound.0.len() != self.params.len() {
            return Err(Error::Contract("binding does not match parameter set".into()));
        }
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            if let Some(g) = tape.grad(v) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }
}
