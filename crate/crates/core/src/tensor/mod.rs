//! Dense 4-D tensors and a tape-based reverse-mode autodiff engine.
//!
//! Layout is always (batch, channel, row, column). A [`Graph`] records every
//! operation of one forward pass; [`Graph::backward`] then walks the tape in
//! reverse creation order. Reductions iterate in a fixed order, so results are
//! bit-identical across runs.

mod conv;
mod graph;
pub mod gradcheck;
mod optim;

#[cfg(test)]
mod tests;

use std::fmt::Debug;

use num_traits::{Float, NumAssign};

use crate::error::{Error, Result};

pub use conv::{conv2d_reference, ConvGeom};
pub use graph::{BatchStats, Gradients, Graph, NodeId};
pub use optim::{sgd_step, Sgd};

/// Floating-point element type of the engine (`f32` or `f64`).
pub trait Scalar: Float + NumAssign + Default + Debug + Send + Sync + 'static {
    fn cast_from(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite f64 converts to any float")
    }
    fn as_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).expect("floats convert to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major tensor of shape (batch, channel, row, column).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], v: T) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    /// Row vector of shape (1, 1, 1, n).
    pub fn vector(values: Vec<T>) -> Self {
        Tensor {
            shape: [1, 1, 1, values.len()],
            data: values,
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for b in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        data.push(f([b, c, h, w]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::cast_from(v.as_f64())).collect(),
        }
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }
}
