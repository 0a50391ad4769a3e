//! Minimal CPU tensor engine: the layers a plain feed-forward CNN needs,
//! hand-written reverse passes, cross-entropy and AdamW.

pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod network;
pub mod optim;
pub mod pool;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use batchnorm::BatchNorm2d;
pub use conv::{Conv2d, ConvKernel};
pub use linear::Linear;
pub use loss::cross_entropy;
pub use network::{ConvBlock, Network, TrainableCount};
pub use optim::{AdamW, AdamWConfig};
pub use pool::MaxPool2d;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    pub(crate) fn forward_in_place<T: Scalar>(self, x: &mut [T]) {
        if self == Activation::Relu {
            x.iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v = T::zero()
                }
            });
        }
    }

    /// `output` is the post-activation value; ReLU's subgradient at 0 is 0.
    pub(crate) fn backward_in_place<T: Scalar>(self, output: &[T], grad: &mut [T]) {
        if self == Activation::Relu {
            grad.iter_mut().zip(output).for_each(|(g, &y)| {
                if y <= T::zero() {
                    *g = T::zero()
                }
            });
        }
    }
}

/// A learnable tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    grad_fresh: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            trainable: true,
            grad_fresh: false,
        }
    }

    pub fn frozen(value: Tensor<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn has_fresh_grad(&self) -> bool {
        self.grad_fresh
    }

    pub(crate) fn set_grad(&mut self, grad: Tensor<T>) -> Result<()> {
        grad.ensure_shape(self.value.shape(), "parameter gradient")?;
        self.grad = grad;
        self.grad_fresh = true;
        Ok(())
    }

    pub(crate) fn consume_grad(&mut self) {
        self.grad_fresh = false;
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
        self.grad_fresh = false;
    }
}

pub(crate) fn check_rank4<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match *x.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::Shape(format!(
            "{what}: expected an N×C×H×W tensor, got {:?}",
            x.shape()
        ))),
    }
}
