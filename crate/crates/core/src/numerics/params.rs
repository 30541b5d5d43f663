use indexmap::IndexMap;

use super::ops::NormStats;
use super::tensor::{Scalar, Tensor4};
use crate::error::{Error, Result};

/// Role of a stored array; decides decay and whether it counts as trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    Adjacency,
    /// Batch-norm running statistic; persisted but never optimized.
    RunningStat,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        self != ParamKind::RunningStat
    }

    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Adjacency)
    }

    pub fn tag(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::NormScale => 2,
            ParamKind::NormShift => 3,
            ParamKind::Adjacency => 4,
            ParamKind::RunningStat => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::NormScale,
            3 => ParamKind::NormShift,
            4 => ParamKind::Adjacency,
            5 => ParamKind::RunningStat,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub kind: ParamKind,
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
}

/// Named parameter arrays in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor4<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor4::zeros(value.dims());
        self.entries.insert(name, Param { kind, value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Validation(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Validation(format!("unknown parameter {name:?}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor4<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Exact number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.kind.is_trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// Trainable scalars whose names start with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, p)| p.kind.is_trainable() && n.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor4<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.dims() != grad.dims() {
            return Err(Error::Shape(format!(
                "gradient for {name:?} has dims {:?}, parameter has {:?}",
                grad.dims(),
                p.grad.dims()
            )));
        }
        p.grad.add_assign(grad);
        Ok(())
    }

    /// Running statistics stored under `{prefix}/running_mean` and `/running_var`.
    pub fn norm_stats(&self, prefix: &str) -> Result<NormStats<T>> {
        Ok(NormStats {
            mean: self.value(&format!("{prefix}/running_mean"))?.data().to_vec(),
            var: self.value(&format!("{prefix}/running_var"))?.data().to_vec(),
        })
    }

    pub fn set_norm_stats(&mut self, prefix: &str, stats: &NormStats<T>) -> Result<()> {
        self.get_mut(&format!("{prefix}/running_mean"))?
            .value
            .data_mut()
            .copy_from_slice(&stats.mean);
        self.get_mut(&format!("{prefix}/running_var"))?
            .value
            .data_mut()
            .copy_from_slice(&stats.var);
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
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

    /// True when both stores hold the same names, kinds and bit-identical values.
    pub fn values_equal(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.iter().zip(other.iter()).all(|((na, a), (nb, b))| {
                na == nb && a.kind == b.kind && a.value == b.value
            })
    }
}
