use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{grad_check_piecewise, Float, Graph, Tensor, Var};

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
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
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces every value with the same-named tensor from `other`, which
    /// must hold exactly the same names and shapes.
    pub fn assign_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for (name, t) in other {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
            if self.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    self.get(id).shape(),
                    t.shape()
                )));
            }
            *self.get_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Places every parameter on `graph`, as trainable leaves or constants.
    pub fn bind<'g, T: Float>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| graph.leaf(v.cast(), trainable))
                .collect(),
        }
    }
}

impl ParamStore {
    /// Piecewise-aware central-difference check (in f64) of `loss` with
    /// respect to entries `start..start + len` of parameter `name`; all
    /// other parameters are held fixed.
    pub fn grad_check_slice<F>(&self, name: &str, start: usize, len: usize, h: f64, loss: F) -> Result<f64>
    where
        F: for<'g> Fn(&Bound<'g, f64>, &'g Graph<f64>) -> Var<'g, f64>,
    {
        let id = self
            .find(name)
            .ok_or_else(|| Error::invalid("grad_check_slice", format!("no parameter {name}")))?;
        let full: Tensor<f64> = self.get(id).cast();
        let shape = full.shape().to_vec();
        let n = full.numel();
        if len == 0 || start + len > n {
            return Err(Error::invalid(
                "grad_check_slice",
                format!("slice {start}..{} outside {name} with {n} entries", start + len),
            ));
        }
        let flat = full.reshape([n])?;
        let probe = flat.narrow(0, start, len)?;
        let before = (start > 0).then(|| flat.narrow(0, 0, start)).transpose()?;
        let after = (start + len < n).then(|| flat.narrow(0, start + len, n - start - len)).transpose()?;
        grad_check_piecewise(
            |g, x| {
                let mut parts = Vec::new();
                parts.extend(before.clone().map(|t| g.constant(t)));
                parts.push(x);
                parts.extend(after.clone().map(|t| g.constant(t)));
                let whole = Var::concat(&parts, 0).and_then(|v| v.reshape(&shape)).expect("slice shapes agree");
                let mut p = self.bind(g, false);
                p.replace(id, whole);
                loss(&p, g)
            },
            &probe,
            h,
        )
    }
}

/// Parameters placed on one graph.
pub struct Bound<'g, T: Float> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Float> Bound<'g, T> {
    pub fn get(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    /// Swaps in a different variable for one parameter, e.g. to probe a
    /// slice of it in a gradient check.
    pub fn replace(&mut self, id: ParamId, var: Var<'g, T>) {
        self.vars[id.0] = var;
    }

    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }
}

/// Adds freshly initialized parameters under a name prefix.
pub struct Init<'a, R: Rng> {
    pub(crate) store: &'a mut ParamStore,
    pub(crate) rng: &'a mut R,
    prefix: String,
}

/// Standard deviation of a unit normal truncated at ±2.
const TRUNC2_STD: f64 = 0.879_625_66;

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, prefix: &str) -> Self {
        Init {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn scope<'b>(&'b mut self, name: &str) -> Init<'b, R> {
        Init {
            store: self.store,
            rng: self.rng,
            prefix: format!("{}.{name}", self.prefix),
        }
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> ParamId {
        self.store.add(format!("{}.{name}", self.prefix), Tensor::full(shape, value))
    }

    /// Truncated normal (±2 std) with variance `1 / fan_in`.
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let std = 1.0 / (fan_in as f64).sqrt() / TRUNC2_STD;
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break (z * std) as f32;
            }
        });
        self.store.add(format!("{}.{name}", self.prefix), t)
    }
}
