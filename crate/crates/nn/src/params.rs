//! Named parameter tensors with matching gradient slots.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Batch-norm gamma.
    Scale,
    /// Batch-norm beta.
    Shift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Updated by the optimizer. Running statistics are not.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Recovers the kind from the naming scheme used by the layers.
    pub fn from_name(name: &str) -> Option<Self> {
        let suffix = name.rsplit('.').next()?;
        Some(match suffix {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "gamma" => ParamKind::Scale,
            "beta" => ParamKind::Shift,
            "running_mean" => ParamKind::RunningMean,
            "running_var" => ParamKind::RunningVar,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered by name, so iteration (and serialization) order is stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) {
        let grad = Tensor::zeros(&value.shape);
        self.entries.insert(name.into(), Param { kind, value, grad });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&[T]> {
        Ok(&self.get(name)?.value.data)
    }

    pub fn grad(&self, name: &str) -> Result<&[T]> {
        Ok(&self.get(name)?.grad.data)
    }

    /// Value slice after checking the expected element count.
    pub fn value_checked(&self, name: &str, len: usize) -> Result<&[T]> {
        let v = self.value(name)?;
        if v.len() != len {
            return Err(Error::ShapeMismatch(format!("{name}: expected {len} values, found {}", v.len())));
        }
        Ok(v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total count of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            kind: p.kind,
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in &self.entries {
            if p.grad.shape != p.value.shape {
                return Err(Error::ShapeMismatch(format!("{name}: gradient shape differs from value")));
            }
            if p.kind == ParamKind::RunningVar && p.value.data.iter().any(|&v| !(v > T::zero())) {
                return Err(Error::InvalidParams(format!("{name}: running variance must be positive")));
            }
        }
        Ok(())
    }

    /// Copies values from `other` for every name present here. Every name
    /// must exist in `other` with the same shape.
    pub fn load_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, p) in self.entries.iter_mut() {
            let src = other.get(name)?;
            if src.value.shape != p.value.shape {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    p.value.shape, src.value.shape
                )));
            }
            p.value.data.copy_from_slice(&src.value.data);
        }
        Ok(())
    }
}
