//! Dense row-major tensors and the reverse-mode tape that differentiates them.
//!
//! [`Tensor`] is a plain value: a shape and a shared, immutable buffer. It is
//! `Send + Sync` and cheap to clone. Differentiable computation happens on a
//! [`Tape`]; every operation on a [`Var`] appends a node holding its value and
//! (when any input requires a gradient) a backward rule. Node indices are
//! assigned in creation order, so the tape is always topologically sorted and
//! a single reverse sweep visits each node once.
//!
//! All reductions accumulate sequentially in row-major order. Operations that
//! use worker threads split work along independent output elements only, so
//! results are bitwise identical for any worker count.

mod element;
mod functional;
mod gemm;
mod gradcheck;
mod ops;
mod tape;

pub use element::{DType, Element};
pub use functional::{
    batch_norm_infer, batch_norm_train, conv2d, cross_entropy, global_avg_pool, leaky_relu,
    max_pool2d, relu, softmax, BatchStats, Padding,
};
pub use gradcheck::{grad_check, GradCheck};
pub use ops::{broadcast_shape, Axes, ReduceOp};
pub use tape::{Tape, Var};

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("axis {axis} is invalid for a tensor of rank {ndim}")]
    InvalidAxis { axis: usize, ndim: usize },
    #[error("kernel {kernel:?} is larger than the padded input {input:?}")]
    KernelLargerThanInput { kernel: Vec<usize>, input: Vec<usize> },
    #[error("batch statistics need at least 2 values per channel, got {count}")]
    DegenerateBatch { count: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("rows of the probability input must sum to 1 (row {row} sums to {sum})")]
    NotADistribution { row: usize, sum: f64 },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("variable is not attached to an active tape")]
    DetachedTape,
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// A dense n-dimensional array. Rank 0 (shape `[]`) holds a single scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) || numel_of(shape) != data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Builds a tensor whose shape is known to be valid for `data`.
    pub(crate) fn from_parts(data: Vec<T>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![value], Vec::new())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        Self::new(vec![value; numel_of(shape)], shape)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn from_f64(values: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(values.iter().map(|&v| T::of(v)).collect(), shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) || numel_of(shape) != self.numel() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: self.numel(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            self.shape.clone(),
        )
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{}>{:?} [", T::DTYPE, self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.numel() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_element_count() {
        assert!(Tensor::<f64>::new(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
        assert!(Tensor::<f64>::new(vec![], &[0]).is_err());
        let t = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(t.numel(), 4);
        assert_eq!(t.reshape(&[4]).unwrap().shape(), &[4]);
        assert!(t.reshape(&[3]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::scalar(2.5f32);
        assert_eq!(s.ndim(), 0);
        assert_eq!(s.item().unwrap(), 2.5);
    }

    #[test]
    fn data_mut_copies_on_write() {
        let a = Tensor::<f64>::ones(&[3]).unwrap();
        let mut b = a.clone();
        b.data_mut()[0] = 5.0;
        assert_eq!(a.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(b.data(), &[5.0, 1.0, 1.0]);
    }
}
