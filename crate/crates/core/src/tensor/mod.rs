//! Dense `f64` tensors and a reverse-mode gradient tape.
//!
//! A [`Tensor`] is a plain value: a shape and row-major data. Differentiation
//! happens on a [`Tape`], which records every operation applied to the
//! [`Var`] handles it hands out and replays them backwards on request.
//!
//! Broadcasting follows the trailing-dimension rule: shapes are aligned at
//! their last axis, and each aligned pair of extents must be equal or one of
//! them must be 1. Missing leading axes count as 1.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{grad_check, grad_check_with_fault, GradCheckReport};
pub use kernels::{pool_regions, PoolMode, Region};
pub use tape::{Gradients, Op, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} values")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("zero extent in shape {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("shapes {0:?} and {1:?} are not broadcastable")]
    Broadcast(Vec<usize>, Vec<usize>),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("log of non-positive value {0}")]
    LogDomain(f64),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("kernel extent {0} is not odd")]
    EvenKernel(usize),
    #[error("convolution output extent would be {0}")]
    EmptyOutput(i64),
    #[error("extent {extent} is not divisible by window {window}")]
    NotDivisible { extent: usize, window: usize },
    #[error("temperature {0} is not positive")]
    Temperature(f64),
    #[error("expected {expected} temperatures, got {got}")]
    TemperatureCount { expected: usize, got: usize },
    #[error("backward root must hold exactly one element, found {0}")]
    NonScalarRoot(usize),
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("variable {0} does not belong to this tape")]
    ForeignVar(usize),
    #[error("gradient check probe produced non-finite loss")]
    NonFiniteProbe,
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::BadLength { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(TensorError::NonScalarRoot(self.data.len()));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Broadcast shape of `a` and `b` under the trailing-dimension rule.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::Broadcast(a.to_vec(), b.to_vec())),
        };
    }
    Ok(out)
}

/// For every flat index of `out_shape`, the flat index into a tensor of
/// shape `src` that broadcasts to it.
pub(crate) fn broadcast_index_map(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

/// Temperature-scaled softmax along the last axis.
///
/// Each class `c` is divided by `temperatures[c]` before a max-subtracted
/// exponential normalization.
pub fn softmax(logits: &Tensor, temperatures: &[f64]) -> Result<Tensor> {
    let axis = logits.shape.len() - 1;
    let mut out = Tensor::zeros(&logits.shape);
    kernels::softmax_axis(logits, axis, Some(temperatures), false, out.data_mut())?;
    Ok(out)
}

/// Log of [`softmax`], computed without forming the probabilities first.
pub fn log_softmax(logits: &Tensor, temperatures: &[f64]) -> Result<Tensor> {
    let axis = logits.shape.len() - 1;
    let mut out = Tensor::zeros(&logits.shape);
    kernels::softmax_axis(logits, axis, Some(temperatures), true, out.data_mut())?;
    Ok(out)
}
