use std::cell::RefCell;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Network;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Named parameter tensors of all four networks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parameters {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            tensor,
            frozen: false,
        });
        Ok(())
    }

    pub(crate) fn init(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: String,
        shape: Vec<usize>,
        init: Init,
    ) -> Result<()> {
        let normal = Normal::new(0.0f32, 0.02).unwrap();
        let t = match init {
            Init::Normal => Tensor::from_fn(shape, |_| normal.sample(rng))?,
            Init::Zeros => Tensor::zeros(shape)?,
            Init::Ones => Tensor::from_fn(shape, |_| 1.0)?,
        };
        self.insert(name, t)
    }

    pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].tensor)
    }

    pub fn is_frozen(&self, name: &str) -> Option<bool> {
        self.index.get(name).map(|&i| self.params[i].frozen)
    }

    pub fn set_frozen(&mut self, net: Network, frozen: bool) {
        let prefix = net.prefix();
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Freezes everything except the listed networks.
    pub fn train_only(&mut self, nets: &[Network]) {
        for p in &mut self.params {
            p.frozen = !nets.iter().any(|n| p.name.starts_with(n.prefix()));
        }
    }

    pub fn network(&self, net: Network) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(move |p| p.name.starts_with(net.prefix()))
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Binds parameters to a tape lazily: trainable tensors become gradient
    /// leaves, frozen ones constants.
    pub fn bind<'a, 't>(&'a self, tape: &'t Tape) -> Bound<'a, 't> {
        Bound {
            params: self,
            tape,
            vars: RefCell::new(vec![None; self.params.len()]),
            track: true,
        }
    }

    /// Binds every tensor as a constant.
    pub fn bind_frozen<'a, 't>(&'a self, tape: &'t Tape) -> Bound<'a, 't> {
        Bound {
            track: false,
            ..self.bind(tape)
        }
    }

    /// Adds the tape gradients of every bound trainable leaf into the
    /// tensors' gradient slots.
    pub fn accumulate_grads(&mut self, bound: &Bound<'_, '_>) -> Result<()> {
        self.add_grads(bound.gradients())
    }

    /// Adds `(index, gradient)` pairs as produced by [`Bound::gradients`].
    pub fn add_grads(&mut self, grads: Vec<(usize, Vec<f32>)>) -> Result<()> {
        for (i, g) in grads {
            let p = self
                .params
                .get_mut(i)
                .ok_or_else(|| Error::invalid(format!("no parameter at index {i}")))?;
            p.tensor.accumulate_grad(&g)?;
        }
        Ok(())
    }
}

/// Tape view of a [`Parameters`] collection.
pub struct Bound<'a, 't> {
    params: &'a Parameters,
    tape: &'t Tape,
    vars: RefCell<Vec<Option<Var<'t>>>>,
    track: bool,
}

impl<'a, 't> Bound<'a, 't> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        let &i = self
            .params
            .index
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))?;
        if let Some(v) = self.vars.borrow()[i] {
            return Ok(v);
        }
        let p = &self.params.params[i];
        let v = if self.track && !p.frozen {
            self.tape.param(&p.tensor)
        } else {
            self.tape.constant(&p.tensor)
        };
        self.vars.borrow_mut()[i] = Some(v);
        Ok(v)
    }

    /// Tape gradients of every trainable parameter touched so far, keyed by
    /// parameter index.
    pub fn gradients(&self) -> Vec<(usize, Vec<f32>)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.filter(|v| v.requires_grad()).map(|v| (i, v.grad())))
            .collect()
    }

    /// Substitutes a variable for a named parameter (used by gradient checks).
    pub fn set(&self, name: &str, var: Var<'t>) -> Result<()> {
        let &i = self
            .params
            .index
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))?;
        self.vars.borrow_mut()[i] = Some(var);
        Ok(())
    }
}
