//! Minimal dense-tensor math with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape of recorded operations, rebuilt per piece since
//! sequence lengths vary. [`DiffValue`] handles index into the tape; forward
//! values are computed eagerly and [`Graph::backward`] accumulates gradients
//! in reverse recording order, which is a reverse topological order by
//! construction. Everything is 64-bit; shape mismatches are programming
//! errors and panic with the offending dimensions.

mod gradcheck;
mod graph;
mod rng;

pub use gradcheck::{grad_check, grad_check_5point, GradCheckError, GradCheckReport};
pub use graph::{lstm_cell, DiffValue, Graph, LstmCell};
pub use rng::Rng;

use serde::{Deserialize, Serialize};

/// A plain dense tensor: shape plus a row-major f64 buffer. This is the
/// storage type for parameters and gradients outside any graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match buffer length {}",
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Self {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| (rng.uniform() * 2.0 - 1.0) * bound)
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.normal() * std).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Matrix row view; panics unless the tensor is 2-D.
    pub fn row(&self, r: usize) -> &[f64] {
        assert_eq!(self.shape.len(), 2, "row() needs a 2-D tensor");
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        assert_eq!(self.shape.len(), 2, "row_mut() needs a 2-D tensor");
        let cols = self.shape[1];
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }
}
