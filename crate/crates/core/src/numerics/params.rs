use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{RngState, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, addressed by a stable dotted path.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: BTreeMap::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter path {name}")));
        }
        if !tensor.is_finite() {
            return Err(Error::Numeric(format!("parameter {name} has non-finite values")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Stores accumulated gradients into each tensor's gradient slot.
    pub fn attach_grads(&mut self, grads: Gradients<T>) -> Result<()> {
        if grads.per_param.len() != self.tensors.len() {
            return Err(Error::shape("attach_grads", "gradient set does not match parameter set"));
        }
        for (t, g) in self.tensors.iter_mut().zip(grads.per_param) {
            t.set_grad(g)?;
        }
        Ok(())
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub per_param: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self { per_param: params.tensors.iter().map(|t| vec![T::zero(); t.numel()]).collect() }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.per_param[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.per_param.iter_mut().zip(&other.per_param) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.per_param {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn global_norm(&self) -> T {
        self.per_param
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.per_param.iter().flatten().all(|v| v.is_finite())
    }
}

/// Registers parameters under a common path prefix.
pub struct ParamBuilder<'a, T> {
    params: &'a mut ParamSet<T>,
    rng: &'a mut RngState,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(params: &'a mut ParamSet<T>, rng: &'a mut RngState) -> Self {
        Self { params, rng, prefix: String::new() }
    }

    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut ParamBuilder<'_, T>) -> R) -> R {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut child = ParamBuilder { params: &mut *self.params, rng: &mut *self.rng, prefix };
        f(&mut child)
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Glorot-uniform `fan_in × fan_out` weight.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::cast(self.rng.uniform_range(-limit, limit)))
            .collect();
        let t = Tensor::matrix(fan_in, fan_out, data)?;
        self.params.insert(self.path(name), t)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<ParamId> {
        let data = (0..rows * cols).map(|_| T::cast(self.rng.normal() * std)).collect();
        self.params.insert(self.path(name), Tensor::matrix(rows, cols, data)?)
    }

    pub fn constant(&mut self, name: &str, len: usize, value: f64) -> Result<ParamId> {
        self.params.insert(self.path(name), Tensor::full(&[len], T::cast(value))?)
    }
}
