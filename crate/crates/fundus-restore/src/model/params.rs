//! Named-tensor parameter container.
//!
//! Tensors live in a vector in construction order (which is fixed by the
//! model-building code), with a name index on the side. The stable order
//! is what makes flat indexing, optimizer state pairing, checkpoint
//! layout, and gradient-norm reductions deterministic.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::model::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct ParamSet<S: Scalar> {
    tensors: Vec<(String, ArrayD<S>)>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: ArrayD<S>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.tensors.len());
        self.tensors.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> &ArrayD<S> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.tensors[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<S> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.tensors[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<S>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<S>)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    /// Total number of scalar parameters.
    pub fn flat_len(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    /// Read the i-th scalar in the global flattened ordering (tensor
    /// order, then row-major within each tensor).
    pub fn get_flat(&self, mut i: usize) -> Result<S> {
        for (_, t) in &self.tensors {
            if i < t.len() {
                return Ok(t.as_slice().expect("standard layout")[i]);
            }
            i -= t.len();
        }
        Err(Error::Index(format!(
            "flat parameter index beyond {}",
            self.flat_len()
        )))
    }

    pub fn set_flat(&mut self, mut i: usize, v: S) -> Result<()> {
        for (_, t) in &mut self.tensors {
            if i < t.len() {
                t.as_slice_mut().expect("standard layout")[i] = v;
                return Ok(());
            }
            i -= t.len();
        }
        Err(Error::Index(format!(
            "flat parameter index beyond {}",
            self.flat_len()
        )))
    }

    /// Name and within-tensor offset of the i-th flat scalar.
    pub fn locate_flat(&self, mut i: usize) -> Result<(&str, usize)> {
        for (n, t) in &self.tensors {
            if i < t.len() {
                return Ok((n.as_str(), i));
            }
            i -= t.len();
        }
        Err(Error::Index(format!(
            "flat parameter index beyond {}",
            self.flat_len()
        )))
    }

    /// A new set with the same names and shapes, all zeros. Used for
    /// gradient accumulators and optimizer moments.
    pub fn zeros_like(&self) -> ParamSet<S> {
        let mut out = ParamSet::new();
        for (n, t) in &self.tensors {
            out.insert(n, ArrayD::zeros(IxDyn(t.shape())));
        }
        out
    }

    /// Elementwise accumulate `other` into self (shapes must match).
    pub fn add_assign(&mut self, other: &ParamSet<S>) {
        assert_eq!(self.tensors.len(), other.tensors.len());
        for ((na, ta), (nb, tb)) in self.tensors.iter_mut().zip(&other.tensors) {
            assert_eq!(na, nb, "parameter order mismatch");
            *ta += tb;
        }
    }

    pub fn scale(&mut self, factor: S) {
        for (_, t) in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }

    /// Global L2 norm across every tensor, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for (_, t) in &self.tensors {
            for v in t.iter() {
                let x = v.to_f64_exact();
                acc += x * x;
            }
        }
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Convert element type (f32 -> f64 for the gradient-check path).
    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (n, t) in &self.tensors {
            out.insert(n, t.mapv(|v| T::from_f64_exact(v.to_f64_exact())));
        }
        out
    }
}
