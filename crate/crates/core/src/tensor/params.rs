//! Named trainable parameters and their accumulated gradients.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::GradMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, index: usize) -> &Matrix {
        &self.params[index].value
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Matrix {
        &mut self.params[index].value
    }

    pub fn grad(&self, index: usize) -> &Matrix {
        &self.params[index].grad
    }

    pub fn name(&self, index: usize) -> &str {
        &self.params[index].name
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Matrix::zeros(p.value.rows(), p.value.cols());
        }
    }

    /// Adds `scale * grads` into the stored gradients. Parameters absent
    /// from the map are untouched (their gradient contribution is zero).
    pub fn accumulate(&mut self, grads: &GradMap, scale: f64) {
        for (idx, g) in grads.iter() {
            let p = &mut self.params[idx];
            debug_assert_eq!(p.value.shape(), g.shape());
            p.grad = p.grad.add(&g.scale(scale)).expect("gradient shape");
        }
    }

    /// Total number of scalar entries across all parameter values.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn grads_all_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.all_finite())
    }
}
