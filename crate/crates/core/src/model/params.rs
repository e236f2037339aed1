use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Same names and shapes as `other`.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                None => return Err(Error::Checkpoint(format!("parameter '{name}' missing"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter '{name}' has shape {:?} vs {:?}",
                        t.shape(),
                        o.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.tensors.keys().find(|n| !self.tensors.contains_key(*n)) {
            return Err(Error::Checkpoint(format!("unexpected parameter '{extra}'")));
        }
        Ok(())
    }
}

/// How a fresh parameter is initialized.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    Uniform(f64),
}

pub(crate) fn init_tensor<R: Rng + ?Sized>(shape: &[usize], init: Init, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Xavier { fan_in, fan_out } => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-a..a)).collect()
        }
        Init::Uniform(a) => (0..n).map(|_| rng.gen_range(-a..a)).collect(),
    };
    Tensor::raw(shape.to_vec(), data)
}

/// Lazily places parameters into a graph, once per graph, and remembers
/// which node each name became.
pub struct Binder<'a> {
    params: &'a ParamStore,
    trainable: bool,
    bound: HashMap<String, Var>,
}

impl<'a> Binder<'a> {
    /// Parameters become differentiable leaves.
    pub fn trainable(params: &'a ParamStore) -> Self {
        Self {
            params,
            trainable: true,
            bound: HashMap::new(),
        }
    }

    /// Parameters become constants (inference).
    pub fn frozen(params: &'a ParamStore) -> Self {
        Self {
            params,
            trainable: false,
            bound: HashMap::new(),
        }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.require(name)?.clone();
        let v = if self.trainable { g.param(t) } else { g.constant(t) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Name → node for every parameter touched so far, in name order.
    pub fn bindings(&self) -> BTreeMap<String, Var> {
        self.bound.iter().map(|(k, &v)| (k.clone(), v)).collect()
    }
}
