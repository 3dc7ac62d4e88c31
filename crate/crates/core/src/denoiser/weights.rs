use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Named tensors, iterated in name order.
#[derive(Clone, Debug, Default)]
pub struct ModelWeights {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks that names and shapes match `manifest` exactly.
    pub fn check_manifest(&self, manifest: &[(String, Vec<usize>)]) -> Result<()> {
        for (name, shape) in manifest {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("weight `{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        if self.len() != manifest.len() {
            let extra: Vec<&str> =
                self.names().filter(|n| !manifest.iter().any(|(m, _)| m == n)).collect();
            return Err(Error::InvalidArgument(format!("unexpected weights: {}", extra.join(", "))));
        }
        Ok(())
    }

    /// Registers every tensor on `g`, as trainable leaves or as constants.
    pub fn bind<T: Element>(&self, g: &Graph<T>, trainable: bool) -> BoundWeights<T> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let t = t.cast::<T>();
                (k.clone(), if trainable { g.param(t) } else { g.constant(t) })
            })
            .collect();
        BoundWeights { vars }
    }
}

/// Weights living on a particular graph.
pub struct BoundWeights<T: Element = f32> {
    vars: BTreeMap<String, Var<T>>,
}

impl<T: Element> BoundWeights<T> {
    pub fn get(&self, name: &str) -> Result<&Var<T>> {
        self.vars.get(name).ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<T>)> {
        self.vars.iter()
    }

    pub fn replace(&mut self, name: &str, v: Var<T>) -> Option<Var<T>> {
        self.vars.insert(name.to_string(), v)
    }
}

pub(crate) fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [o, c, kh, kw] => (c * kh * kw, o * kh * kw),
        [i, o] => (*i, *o),
        [n] => (*n, *n),
        _ => {
            let n: usize = shape.iter().product();
            (n, n)
        }
    }
}

/// Glorot-uniform initialization.
pub(crate) fn xavier<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let (fi, fo) = fans(shape);
    let a = (6.0 / (fi + fo) as f64).sqrt();
    Tensor::rand_uniform(shape.to_vec(), -a, a, rng)
}
