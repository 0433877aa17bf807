use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Real;
use crate::error::{Error, Result};

/// Shape-carrying row-major array with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R: Real> {
    shape: Vec<usize>,
    values: Vec<R>,
    grad: Option<Vec<R>>,
    requires_grad: bool,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, values: Vec<R>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel(&shape) != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                values.len()
            )));
        }
        Ok(Self {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, R::zero())
    }

    pub fn full(shape: &[usize], value: R) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![value; numel(shape)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: R) -> Self {
        Self::full(&[1], value)
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let values = (0..numel(shape))
            .map(|_| R::of(dist.sample(rng)))
            .collect();
        Self {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [R] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<R> {
        self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[R]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient accumulator, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[R]) {
        assert_eq!(g.len(), self.values.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = R::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| S::of(v.f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| S::of(v.f64())).collect()),
            requires_grad: self.requires_grad,
        }
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<R: Real> {
    pub name: String,
    pub tensor: Tensor<R>,
}

impl<R: Real> Parameter<R> {
    pub fn new(name: impl Into<String>, tensor: Tensor<R>) -> Self {
        Self {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
        }
    }
}
