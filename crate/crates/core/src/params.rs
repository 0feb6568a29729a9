//! Named parameter storage with gradient buffers and freeze flags.

use indexmap::IndexMap;

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    has_grad: bool,
}

impl Param {
    /// Whether any gradient was accumulated since the last `zero_grad`.
    pub fn has_grad(&self) -> bool {
        self.has_grad
    }
}

/// Insertion-ordered map from `group/layer/name` paths to parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamRegistry {
    params: IndexMap<String, Param>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(
            name,
            Param {
                value,
                grad,
                trainable: true,
                has_grad: false,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .trainable = trainable;
        Ok(())
    }

    /// Set every parameter's trainable flag from a predicate on its name.
    pub fn set_trainable_where(&mut self, f: impl Fn(&str) -> bool) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = f(name);
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable_where(|_| false);
    }

    /// Add the parameter gradients of one backward sweep into the buffers.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.params() {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            if p.grad.shape() != g.shape() {
                return Err(Error::shape(format!("gradient for `{name}`")));
            }
            p.grad.add_assign(g);
            p.has_grad = true;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
            p.has_grad = false;
        }
    }

    /// All parameter values flattened in registry order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .values()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::DimMismatch(values.len(), self.numel()));
        }
        let mut at = 0;
        for p in self.params.values_mut() {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Flattened gradient buffers in registry order.
    pub fn flatten_grads(&self) -> Vec<f64> {
        self.params
            .values()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect()
    }

    /// Byte-level snapshot of the values of every parameter matching `f`,
    /// used to check freeze contracts.
    pub fn snapshot_where(&self, f: impl Fn(&str) -> bool) -> Vec<(String, Vec<u64>)> {
        self.iter()
            .filter(|(n, _)| f(n))
            .map(|(n, p)| {
                (
                    n.to_string(),
                    p.value.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    }
}
