//! Dense tensors, a dynamic reverse-mode tape and the differentiable
//! operations the detector is built from.
//!
//! Values are stored as `f64`. Training may run in emulated single precision
//! (see [`Precision`]), in which case every op output is rounded to the
//! nearest `f32` before it is recorded.

mod conv;
mod deform;
pub mod gradcheck;
mod ops;
pub mod serialize;
mod tape;

pub use conv::ConvGeom;
pub use deform::bilinear_sample;
pub use gradcheck::{grad_check, GradCheckReport};
pub use serialize::{read_tensors, write_tensors, DType, NamedTensor};
pub use ops::{bce, focal_term, gate_values, sigmoid, smooth_l1, FocalParams};
pub use tape::{GateGrad, Gradients, Precision, Tape, Var};

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    /// Tensor filled from `f(flat_index)`.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {:?} into {:?}",
                self.shape,
                shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Value at a 4-d index `[n, c, h, w]`.
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cs, hs, ws] = dims4(&self.shape);
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dims4(shape: &[usize]) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "expected a 4-d shape, got {shape:?}");
    [shape[0], shape[1], shape[2], shape[3]]
}

pub(crate) fn expect_rank(shape: &[usize], rank: usize, what: &str) -> Result<()> {
    if shape.len() != rank {
        return Err(shape_err!(
            "{what} expects a rank-{rank} tensor, got shape {shape:?}"
        ));
    }
    Ok(())
}
