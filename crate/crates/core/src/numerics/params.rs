//! Named trainable tensors.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Ordered set of named parameter matrices. Insertion order is the
/// canonical order for optimizers, checkpoints and gradient reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: IndexMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<usize> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let (idx, _) = self.tensors.insert_full(name, value);
        Ok(idx)
    }

    /// Glorot/Xavier uniform initialization, `U(-a, a)` with
    /// `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> Result<usize> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Matrix::from_vec(rows, cols, data)?)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<usize> {
        self.insert(name, Matrix::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn by_index(&self, idx: usize) -> (&str, &Matrix) {
        let (k, v) = self.tensors.get_index(idx).expect("parameter index");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, idx: usize) -> &mut Matrix {
        self.tensors.get_index_mut(idx).expect("parameter index").1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// `(name, rows, cols)` for every tensor, in canonical order.
    pub fn census(&self) -> Vec<(String, usize, usize)> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.rows(), v.cols()))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            tensors: self.tensors.values().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
        }
    }
}

/// One gradient per registered parameter, aligned with [`ParamStore`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub(crate) tensors: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, idx: usize) -> &Matrix {
        &self.tensors[idx]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix> {
        self.tensors.iter()
    }

    /// Index of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.tensors.iter().position(|m| !m.is_finite())
    }
}
