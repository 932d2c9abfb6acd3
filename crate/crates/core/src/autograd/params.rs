//! Named parameter storage and its binding onto a [`Graph`] for one forward pass.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Which part of the model a parameter belongs to. Checkpoints keep the groups apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Encoder weights standing in for the pretrained foundation model.
    EncoderBase,
    LoraA,
    LoraB,
    Decoder,
    Pose,
}

impl ParamGroup {
    pub fn tag(self) -> u8 {
        match self {
            ParamGroup::EncoderBase => 0,
            ParamGroup::LoraA => 1,
            ParamGroup::LoraB => 2,
            ParamGroup::Decoder => 3,
            ParamGroup::Pose => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ParamGroup::EncoderBase,
            1 => ParamGroup::LoraA,
            2 => ParamGroup::LoraB,
            3 => ParamGroup::Decoder,
            4 => ParamGroup::Pose,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub trainable: bool,
    value: Rc<Tensor>,
}

impl Param {
    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, trainable: bool, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, group, trainable, value: Rc::new(value) });
        id
    }

    pub fn normal(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        trainable: bool,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape, |_| normal.sample(rng));
        self.insert(name, group, trainable, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Replace a value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = Rc::new(value);
        Ok(())
    }

    /// Mutable access for in-place optimizer updates.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    /// Number of scalar entries in parameters flagged trainable, by enumeration.
    pub fn trainable_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Lazily places parameters on a graph as leaves; trainable ones receive gradients.
pub struct Binding<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    vars: RefCell<Vec<Option<Var<'g>>>>,
}

impl<'g, 's> Binding<'g, 's> {
    pub fn new(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self { graph, store, vars: RefCell::new(vec![None; store.len()]) }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var<'g> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let v = self.graph.leaf_rc(p.value.clone(), p.trainable);
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradients for every bound trainable parameter that received one.
    pub fn collect(&self, mut grads: Gradients) -> Vec<(ParamId, Tensor)> {
        let vars = self.vars.borrow();
        vars.iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.store.params[i].trainable {
                    return None;
                }
                grads.take_id(v.id()).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}
