use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Named parameter tensors in insertion order. Names are unique and a
/// tensor's shape never changes after it is inserted.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor and returns its index.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::arg(format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(self.tensors.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    /// Overwrites the values of an existing tensor; the shape must match.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::arg(format!("no parameter named `{name}`")))?;
        self.set_at(i, tensor)
    }

    pub(crate) fn set_at(&mut self, i: usize, tensor: Tensor<T>) -> Result<()> {
        if self.tensors[i].shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.names[i],
                self.tensors[i].shape(),
                tensor.shape()
            )));
        }
        self.tensors[i] = tensor;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub(crate) fn tensor_at(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub(crate) fn values_mut(&mut self, i: usize) -> &mut [T] {
        self.tensors[i].data_mut()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every tensor on the tape as a leaf, in store order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.variable(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Collects gradients for bound parameters; parameters that received
    /// no gradient get zeros.
    pub fn gradients(&self, tape: &Tape<T>, bound: &[Var]) -> Vec<Tensor<T>> {
        bound
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub(crate) fn check_layout(&self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::state(format!(
                "parameter layout mismatch: expected {} tensors, checkpoint has {}",
                self.len(),
                other.len()
            )));
        }
        for (name, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.shape() != b.shape() {
                return Err(Error::state(format!(
                    "parameter `{name}`: expected shape {:?}, checkpoint has {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Samples a tensor with i.i.d. normal entries.
pub(crate) fn normal_tensor<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_shapes_fixed() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2])).is_err());
        assert!(s.set("a", Tensor::zeros(&[3])).is_err());
        s.set("a", Tensor::full(&[2], 1.0)).unwrap();
        assert_eq!(s.get("a").unwrap().data(), &[1.0, 1.0]);
        assert!(s.set("b", Tensor::zeros(&[2])).is_err());
    }
}
