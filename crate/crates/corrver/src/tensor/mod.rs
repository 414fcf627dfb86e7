//! Dense tensor storage: contiguous `f32` buffers in row-major layout
//! (last axis fastest), up to 6 axes.

pub mod io;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 6;

/// A dense row-major `f32` tensor. Immutable in spirit: all operations in
/// this crate construct new tensors instead of mutating shared ones, so a
/// `&Tensor` may be handed to several threads at once.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor from a shape and a matching data buffer.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        validate_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let numel = shape.iter().product();
        Ok(Self { shape: shape.to_vec(), data: vec![0.0; numel] })
    }

    pub fn filled(shape: &[usize], value: f32) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.data.iter_mut().for_each(|v| *v = value);
        Ok(t)
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self { shape: other.shape.clone(), data: vec![0.0; other.data.len()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Flat offset of a multi-index (row-major, last axis fastest).
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &x) in idx.iter().enumerate() {
            debug_assert!(x < self.shape[i]);
            off = off * self.shape[i] + x;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f32 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f32) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    /// `self += scale * other`, used by gradient accumulation and SGD.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f32) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add_scaled: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn fill(&mut self, v: f32) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Sum of all elements, accumulated in f64. Reductions for loss values
    /// and test harnesses go through this so the fixed f32 op outputs are
    /// not further perturbed by reduction order.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "dot: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f32 {
        self.data.iter().map(|v| v * v).sum::<f32>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::DegenerateShape(format!(
            "rank must be 1..={}, got {}",
            MAX_RANK,
            shape.len()
        )));
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::DegenerateShape(format!("zero extent in {shape:?}")));
    }
    Ok(())
}

/// Quantized counterpart of [`Tensor`]: u8 codes plus an affine
/// (scale, zero_point) pair, as stored under dtype tag 1 of the binary
/// tensor format.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<u8>,
    pub scale: f32,
    pub zero_point: f32,
}

impl QuantizedTensor {
    pub fn new(shape: &[usize], codes: Vec<u8>, scale: f32, zero_point: f32) -> Result<Self> {
        validate_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != codes.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} codes, buffer has {}",
                shape,
                numel,
                codes.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), codes, scale, zero_point })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Payload size in bytes (codes only, excluding header fields).
    pub fn payload_bytes(&self) -> usize {
        self.codes.len()
    }
}
