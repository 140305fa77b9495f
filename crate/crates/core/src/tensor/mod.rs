//! Dense f64 tensors with a tape-based reverse-mode differentiation engine.
//!
//! Values are row-major `Vec<f64>` buffers. A [`Tape`] records every forward
//! operation for one pass; [`Tape::backward`] replays it in reverse. The tape is
//! dropped after backward, so there are no higher-order derivatives.

pub mod gradcheck;
mod params;
mod tape;

pub use params::{ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var, IGNORE_INDEX};

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not describe {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("ignore index {ignore} collides with vocabulary of size {vocab}")]
    IgnoreIndexInVocab { ignore: i64, vocab: usize },
    #[error("label {label} at position {position} is outside vocabulary of size {vocab}")]
    LabelOutOfRange {
        label: i64,
        position: usize,
        vocab: usize,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor. A scalar has shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("zeros: shape must be non-empty and positive")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("full: shape must be non-empty and positive")
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    /// Gaussian samples with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::new(shape.to_vec(), data).expect("randn: shape must be non-empty and positive")
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Self::new(shape.to_vec(), data).expect("uniform: shape must be non-empty and positive")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the values. Callers must keep them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Extent of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    /// Little-endian bytes of the values, used for checksums and checkpoints.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::InvalidShape { .. })
        ));
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(TensorError::NonFinite { .. })
        ));
    }
}
