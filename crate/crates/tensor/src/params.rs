use crate::error::{Result, TensorError};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Ordered, uniquely named parameter tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut set = Self::new();
        for (name, t) in entries {
            set.push(name, t)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(TensorError::InvalidArgument(format!(
                "duplicate parameter name {name}"
            )));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn extend(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        for (name, t) in entries {
            self.push(name, t)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t).collect()
    }

    /// Total scalar count.
    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every tensor on `tape` as a leaf; trainable leaves collect gradients.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    pub fn into_entries(self) -> Vec<(String, Tensor<T>)> {
        self.entries
    }
}
