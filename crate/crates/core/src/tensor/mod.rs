//! Dense `f64` tensors and a small reverse-mode tape.
//!
//! Feature maps use NCHW layout. A [`Tensor`] is an immutable value; all
//! differentiable math goes through a [`Tape`], which records each operation
//! so that [`Tape::backward`] can replay it in reverse.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use tape::{concat_channels, PoolMode, Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("invalid shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![value; len]).expect("full: invalid shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Self::new(shape, (0..len).map(f).collect()).expect("from_fn: invalid shape")
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
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

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Interprets the tensor as NCHW.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(
                "dims4",
                format!("expected NCHW, got {:?}", self.shape),
            )),
        }
    }

    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, cc, h, w) = self.dims4().expect("at4 on non-4D tensor");
        self.data[((n * cc + c) * h + y) * w + x]
    }

    /// Compensated sum of all elements.
    pub fn sum(&self) -> f64 {
        ops::accurate_sum(self.data.iter().copied())
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bilinear resize (align-corners-false) of the last two axes.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Self> {
        if self.shape.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(Error::invalid(format!(
                "resize_bilinear: cannot resize {:?} to {out_h}x{out_w}",
                self.shape
            )));
        }
        let r = self.shape.len();
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        let planes = self.len() / (h * w);
        let data = ops::upsample_forward(&self.data, planes, h, w, out_h, out_w);
        let mut shape = self.shape.clone();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        Self::new(&shape, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
