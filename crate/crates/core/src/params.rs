//! Named parameter storage and its binding onto a [`Tape`].

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform with variance `2 / fan_in`, for rectified layers.
    He,
    /// Uniform with variance `1 / fan_in`.
    Lecun,
    Zeros,
}

/// Parameters in registration order, addressable by id or by dotted name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter {name} registered twice"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Registers a parameter of `shape` whose fan-in is `fan_in`.
    pub fn init(
        &mut self,
        rng: &mut impl Rng,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        init: Init,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let bound = match init {
            Init::He => (6.0 / fan_in as f64).sqrt(),
            Init::Lecun => (3.0 / fan_in as f64).sqrt(),
            Init::Zeros => 0.0,
        };
        let data = if bound == 0.0 {
            vec![0.0; n]
        } else {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        self.add(name, Tensor::from_vec(shape, data).expect("shape matches data"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Copies values from `other` by name; every parameter here must be
    /// present there with the same shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = other
                .id(name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Checkpoint(format!("missing layer {name}")))?;
            if src.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "layer {name}: checkpoint shape {:?}, model shape {:?}",
                    src.shape(),
                    value.shape()
                )));
            }
            *value = src.clone();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.values.iter().map(|v| Tensor::zeros(v.shape())).collect()
    }
}

/// Lazily places parameters on a tape, as trainable leaves or as constants.
pub struct Bound<'t, 'p> {
    tape: &'t Tape,
    store: &'p ParamStore,
    vars: RefCell<Vec<Option<Var<'t>>>>,
    trainable: bool,
}

impl<'t, 'p> Bound<'t, 'p> {
    pub fn new(tape: &'t Tape, store: &'p ParamStore, trainable: bool) -> Self {
        Bound {
            tape,
            store,
            vars: RefCell::new(vec![None; store.len()]),
            trainable,
        }
    }

    /// Binds parameters to existing vars (used to differentiate with respect
    /// to parameters supplied from outside, e.g. by a gradient check).
    pub fn with_vars(tape: &'t Tape, store: &'p ParamStore, vars: Vec<Var<'t>>) -> Self {
        assert_eq!(vars.len(), store.len());
        Bound {
            tape,
            store,
            vars: RefCell::new(vars.into_iter().map(Some).collect()),
            trainable: true,
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| {
            let value = self.store.get(id).clone();
            if self.trainable {
                self.tape.leaf(value)
            } else {
                self.tape.constant(value)
            }
        })
    }

    /// Adds the gradients of every bound parameter into `acc`.
    pub fn accumulate_grads(&self, grads: &Gradients, acc: &mut [Tensor]) {
        for (slot, var) in acc.iter_mut().zip(self.vars.borrow().iter()) {
            if let Some(g) = var.and_then(|v| grads.get(v)) {
                slot.add_assign(g);
            }
        }
    }
}
