//! Named parameter tensors grouped for freezing, optimisation and storage.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::numeric::{adamw_step, AdamWConfig, AdamWState, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Tokenizer,
    Encoder,
    Gate,
    Decorator,
    Icl,
    Decoder,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Tokenizer,
        Group::Encoder,
        Group::Gate,
        Group::Decorator,
        Group::Icl,
        Group::Decoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Tokenizer => "tokenizer",
            Group::Encoder => "encoder",
            Group::Gate => "gate",
            Group::Decorator => "decorator",
            Group::Icl => "icl",
            Group::Decoder => "decoder",
        }
    }

    pub fn parse(s: &str) -> Option<Group> {
        Self::ALL.into_iter().find(|g| g.as_str() == s)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
struct Param {
    name: String,
    group: Group,
    value: Tensor,
    /// Excluded from gradient updates regardless of the group's flag.
    pinned: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Glorot-style normal initialisation for a `[fan_in, fan_out]` weight.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let sd = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal(rng, &[fan_in, fan_out], sd)
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], sd: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, sd).expect("finite sd");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate {name}");
        self.params.push(Param {
            name,
            group,
            value,
            pinned: false,
        });
        ParamId(self.params.len() - 1)
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

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.params[id.0].group
    }

    pub fn set_pinned(&mut self, id: ParamId, pinned: bool) {
        self.params[id.0].pinned = pinned;
    }

    pub fn is_pinned(&self, id: ParamId) -> bool {
        self.params[id.0].pinned
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of scalar parameters, optionally restricted to some groups.
    pub fn count(&self, groups: Option<&[Group]>) -> usize {
        self.params
            .iter()
            .filter(|p| groups.map_or(true, |g| g.contains(&p.group)))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Little-endian bytes of every tensor in `group`, for freeze checks.
    pub fn group_bytes(&self, group: Group) -> Vec<u8> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .flat_map(|p| p.value.data().iter().flat_map(|x| x.to_le_bytes()))
            .collect()
    }

    /// Places every parameter on `tape`. Parameters of groups rejected by
    /// `trainable`, and pinned parameters, enter as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(Group) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable(p.group) && !p.pinned {
                    tape.leaf(p.value.clone(), true)
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn to_container(&self, c: &mut Container) {
        for p in &self.params {
            c.insert(format!("{}/{}", p.group, p.name), p.value.clone());
        }
    }

    /// Overwrites values from a container written by [`Self::to_container`].
    /// Every parameter must be present with a matching shape.
    pub fn load_from(&mut self, c: &Container) -> Result<()> {
        for p in &mut self.params {
            let key = format!("{}/{}", p.group, p.name);
            let t = c.tensor(&key)?;
            if t.shape() != p.value.shape() {
                return Err(Error::dim("load parameter", p.value.shape(), t.shape()));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snap: &[Tensor]) {
        for (p, t) in self.params.iter_mut().zip(snap) {
            p.value = t.clone();
        }
    }

    pub fn names_by_group(&self) -> BTreeMap<Group, Vec<String>> {
        let mut m: BTreeMap<Group, Vec<String>> = BTreeMap::new();
        for p in &self.params {
            m.entry(p.group).or_default().push(p.name.clone());
        }
        m
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// AdamW moments for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    states: Vec<AdamWState>,
}

impl Optimizer {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        Self {
            states: store
                .params
                .iter()
                .map(|p| AdamWState::new(config, p.value.numel()))
                .collect(),
        }
    }

    /// Updates every parameter that received a gradient. Parameters outside
    /// the graph are left untouched, weight decay included.
    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients) -> Result<usize> {
        let mut updated = 0;
        for (i, p) in store.params.iter_mut().enumerate() {
            if let Some(g) = grads.get(bound.vars[i]) {
                adamw_step(&mut p.value, Some(g), &mut self.states[i])?;
                updated += 1;
            }
        }
        Ok(updated)
    }
}
