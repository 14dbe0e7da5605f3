use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SateError};
use crate::numerics::{Tape, Tensor, Var};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            index: self.index.clone(),
            frozen: self.frozen,
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
            frozen: false,
        }
    }

    /// Registers a tensor. Panics on a duplicate name, which is a model
    /// construction bug.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Frozen stores bind as constants and never receive gradients.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Places a parameter on the tape, once per tape.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        let key = (self.uid, id.0);
        if let Some(v) = tape.binding(key) {
            return v;
        }
        let t = self.tensors[id.0].clone();
        let v = if self.frozen {
            tape.constant(t)
        } else {
            tape.var(t)
        };
        tape.bind(key, v);
        v
    }

    /// Binds parameters to existing tape variables, one per parameter in
    /// store order. Later [`ParamStore::bind`] calls on `tape` return them.
    pub fn bind_to(&self, tape: &mut Tape, vars: &[Var]) -> Result<()> {
        if vars.len() != self.tensors.len() {
            return Err(SateError::dim(
                "bind_to",
                format!("{} variables for {} parameters", vars.len(), self.tensors.len()),
            ));
        }
        for (slot, &v) in vars.iter().enumerate() {
            tape.bind((self.uid, slot), v);
        }
        Ok(())
    }

    /// Adds the gradients that `tape` accumulated for this store's
    /// parameters into their `grad` buffers.
    pub fn absorb_grads(&mut self, tape: &Tape) {
        if self.frozen {
            return;
        }
        for (slot, var) in tape.bindings_of(self.uid) {
            if let Some(g) = tape.grad(var) {
                self.tensors[slot].accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Overwrites one parameter, checking the shape.
    pub fn assign(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| SateError::Checkpoint {
            name: name.to_string(),
            detail: "no such parameter".into(),
        })?;
        let dst = &mut self.tensors[id.0];
        if dst.shape() != value.shape() {
            return Err(SateError::Checkpoint {
                name: name.to_string(),
                detail: format!("shape {:?} vs expected {:?}", value.shape(), dst.shape()),
            });
        }
        dst.data_mut().copy_from_slice(value.data());
        Ok(())
    }
}

pub(crate) fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-bound..bound))
}

pub(crate) fn normal(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}
