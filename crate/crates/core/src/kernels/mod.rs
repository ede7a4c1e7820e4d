//! Deterministic tensor kernels.
//!
//! Every kernel has a generic path (used with `f64` by the training core and
//! with `i64` for exact integer checks) and the fixed-point paths operate on
//! [`FixedTensor`] codes with 64-bit accumulators that refuse to wrap.

mod conv;
mod gemm;
mod quant;

use std::fmt::Debug;
use std::ops::{Add, Mul};

use thiserror::Error;

pub use conv::{conv1d, conv2d_direct, conv2d_fixed, conv2d_fixed_element, conv2d_via_conv1d, dwsconv2d};
pub use gemm::{gemm, gemm_fixed, gemm_fixed_element, Requantizer};
pub use quant::{dequantize, quantize, round_half_even, BitWidth, FixedTensor, QFormat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("invalid bit width {0}; expected one of 16, 12, 8, 4")]
    InvalidBitWidth(u32),
    #[error("quantization scale must be positive and finite, got {0}")]
    NonPositiveScale(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("kernel of length {kernel} longer than input of length {input}")]
    KernelLongerThanInput { kernel: usize, input: usize },
    #[error("channel count mismatch: {0}")]
    ChannelCountMismatch(String),
    #[error("64-bit accumulator overflow (output scale misconfigured?)")]
    AccumulatorOverflow,
}

/// Scalar usable by the generic kernels.
pub trait Element: Copy + Default + PartialEq + Debug + Add<Output = Self> + Mul<Output = Self> {}

impl Element for f64 {}
impl Element for f32 {}
impl Element for i64 {}
impl Element for i32 {}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Element> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::default(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, KernelError> {
        if data.len() != rows * cols {
            return Err(KernelError::ShapeMismatch(format!(
                "{} elements for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, KernelError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(KernelError::ShapeMismatch("ragged rows".into()));
        }
        Ok(Self { rows: r, cols: c, data: rows.concat() })
    }

    pub fn identity(n: usize, one: T) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, one);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Outer product `u v^T`.
    pub fn outer(u: &[T], v: &[T]) -> Self {
        let mut m = Self::zeros(u.len(), v.len());
        for (i, &a) in u.iter().enumerate() {
            for (j, &b) in v.iter().enumerate() {
                m.set(i, j, a * b);
            }
        }
        m
    }
}
