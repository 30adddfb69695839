//! Dense row-major tensors and a reverse-mode tape over them.
//!
//! The engine is intentionally small: it supplies the handful of operations
//! needed by the operator network, the hypernetwork and the training loop,
//! each with a hand-written vector-Jacobian product.

mod conv;
mod graph;

pub use conv::{ConvOptions, Padding};
pub use graph::{Gradients, Graph, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("reflect padding needs spatial size >= kernel size (size {size}, kernel {kernel})")]
    ReflectTooSmall { size: usize, kernel: usize },
    #[error("unsupported stride {0}, expected 1 or 2")]
    BadStride(usize),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("no gradient reached node {0}")]
    DetachedLeaf(usize),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    })
}

/// Contiguous row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(
                "Tensor::new",
                format!("shape {:?} holds {} elements, data has {}", shape, n, data.len()),
            );
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Circular shift along each spatial axis of a `[C, spatial...]` tensor.
    pub fn roll_spatial(&self, shifts: &[isize]) -> Result<Self> {
        let spatial = &self.shape[1..];
        if spatial.len() != shifts.len() {
            return shape_err(
                "roll_spatial",
                format!("{} shifts for {} spatial axes", shifts.len(), spatial.len()),
            );
        }
        let plane: usize = spatial.iter().product();
        let mut out = vec![0.0; self.data.len()];
        let mut idx = vec![0usize; spatial.len()];
        for p in 0..plane {
            let mut rem = p;
            for a in (0..spatial.len()).rev() {
                idx[a] = rem % spatial[a];
                rem /= spatial[a];
            }
            let mut q = 0;
            for a in 0..spatial.len() {
                let n = spatial[a] as isize;
                let t = (idx[a] as isize + shifts[a]).rem_euclid(n) as usize;
                q = q * spatial[a] + t;
            }
            for c in 0..self.shape[0] {
                out[c * plane + q] = self.data[c * plane + p];
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
