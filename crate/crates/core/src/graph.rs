//! Named parameters and the per-pass graph that binds them to a tape.

use std::collections::{BTreeMap, HashMap};

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Element, Gradients, Tape, Tensor, TensorError, Var};

/// Whether stochastic regularizers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A learnable tensor with its canonical checkpoint name.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Element> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

pub type ParamGrads<T> = BTreeMap<String, Tensor<T>>;

/// One forward pass: a tape plus the parameters bound to it so far.
///
/// A parameter is bound at most once per graph, so every use of a shared
/// parameter (across layers, modalities or tasks) feeds one gradient slot.
pub struct Graph<'r, T> {
    pub tape: Tape<T>,
    bound: HashMap<String, Var>,
    order: Vec<(String, Var)>,
    mode: Mode,
    rng: Option<&'r mut ChaCha8Rng>,
    frozen: bool,
}

impl<'r, T: Element> Graph<'r, T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            bound: HashMap::new(),
            order: Vec::new(),
            mode,
            rng: None,
            frozen: false,
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }

    pub fn with_rng(mut self, rng: &'r mut ChaCha8Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    /// Bind every parameter as a constant; no gradients are produced.
    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        self.rng.as_deref_mut()
    }

    pub fn bind(&mut self, param: &Param<T>) -> Var {
        if let Some(&v) = self.bound.get(&param.name) {
            return v;
        }
        let v = self.tape.leaf(param.value.clone(), !self.frozen);
        self.bound.insert(param.name.clone(), v);
        self.order.push((param.name.clone(), v));
        v
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Names of the parameters bound so far, in binding order.
    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|(n, _)| n.as_str())
    }

    /// Gradients of `loss` for every bound parameter, keyed by name.
    pub fn gradients(&self, loss: Var) -> Result<ParamGrads<T>, TensorError> {
        let grads: Gradients<T> = self.tape.backward(loss)?;
        Ok(self
            .order
            .iter()
            .filter_map(|(name, v)| grads.get(*v).map(|g| (name.clone(), g.clone())))
            .collect())
    }
}
