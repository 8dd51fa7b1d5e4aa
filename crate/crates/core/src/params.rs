//! Named parameter tensors and their binding onto a tape.

use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Insertion-ordered map from parameter name to tensor. The order is the
/// checkpoint order and the optimizer's reduction order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = tensor,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, tensor));
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(Error::MissingParam(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Glorot-uniform weights: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
        self.insert(name, Tensor::new(shape, data).expect("non-empty shape"));
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    /// Records every parameter on `tape`; those for which `trainable`
    /// returns true become gradient leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let mut vars = HashMap::with_capacity(self.entries.len());
        let mut order = Vec::new();
        for (name, t) in &self.entries {
            let v = if trainable(name) {
                let v = grad_leaf(tape, t);
                order.push((name.clone(), v));
                v
            } else {
                tape.constant(t.clone())
            };
            vars.insert(name.clone(), v);
        }
        Bound {
            vars,
            trainable: order,
        }
    }
}

fn grad_leaf(tape: &mut Tape, t: &Tensor) -> Var {
    let mut t = t.clone();
    t.set_requires_grad(true);
    tape.leaf(&t)
}

/// Parameters recorded on one tape.
#[derive(Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

impl Bound {
    /// Binds each name to the matching var; all are trainable.
    pub fn from_vars(names: &[String], vars: &[Var]) -> Self {
        let pairs: Vec<(String, Var)> = names.iter().cloned().zip(vars.iter().copied()).collect();
        Bound {
            vars: pairs.iter().cloned().collect(),
            trainable: pairs,
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Gradients of the trainable parameters, zero-filled where the loss
    /// does not reach them.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> GradMap {
        self.trainable
            .iter()
            .map(|(name, v)| {
                let g = match grads.get(*v) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; tape.value(*v).len()],
                };
                (name.clone(), g)
            })
            .collect()
    }
}

/// Parameter name to flat gradient.
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Adds `src` into `dst` entry by entry.
pub fn accumulate(dst: &mut GradMap, src: GradMap) {
    for (name, g) in src {
        match dst.get_mut(&name) {
            Some(d) => d.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => {
                dst.insert(name, g);
            }
        }
    }
}
