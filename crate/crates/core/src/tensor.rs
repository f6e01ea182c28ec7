//! Dense row-major tensors.
//!
//! Values are held in `f64` regardless of [`DType`]; a single-precision
//! tensor keeps every element exactly representable as `f32`, so reductions
//! accumulate in double precision and outputs are rounded once at the end.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    /// Result type of an operation mixing `self` and `other`.
    pub fn promote(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }

    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    /// Builds a tensor, rounding values to `dtype` and rejecting non-finite input.
    pub fn new(shape: &[usize], data: Vec<f64>, dtype: DType) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(dim_err(
                "tensor",
                shape.iter().position(|&d| d == 0),
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        if numel(shape) != data.len() {
            return Err(dim_err(
                "tensor",
                None,
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("tensor values must be finite".into()));
        }
        let mut data = data;
        if dtype == DType::F32 {
            data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            dtype,
        })
    }

    pub fn from_f64(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(shape, data, DType::F64)
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f64).collect(), DType::F32)
    }

    /// Internal constructor for kernel outputs that are already checked.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data, dtype }
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![dtype.round(value); numel(shape)],
            dtype,
        }
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        Self::full(shape, 0.0, dtype)
    }

    pub fn ones(shape: &[usize], dtype: DType) -> Self {
        Self::full(shape, 1.0, dtype)
    }

    pub fn scalar(value: f64, dtype: DType) -> Self {
        Self::full(&[1], value, dtype)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Mutable access to the buffer. Callers must keep values finite and
    /// representable in the tensor's dtype; [`Tensor::set`] does both.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn set(&mut self, flat: usize, value: f64) {
        self.data[flat] = self.dtype.round(value);
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        let st = strides(&self.shape);
        let flat: usize = index.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        let data = self.data.iter().map(|&v| dtype.round(v)).collect();
        Tensor::from_parts(self.shape.clone(), data, dtype)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(dim_err(
                "reshape",
                None,
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone(), self.dtype))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of the `index`-th slice along axis 0.
    pub fn index_first(&self, index: usize) -> Tensor {
        let inner = numel(&self.shape[1..]);
        let mut shape = self.shape[1..].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::from_parts(
            shape,
            self.data[index * inner..(index + 1) * inner].to_vec(),
            self.dtype,
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Usage("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut dtype = first.dtype;
        for t in items {
            if t.shape != first.shape {
                return Err(dim_err(
                    "stack",
                    None,
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            dtype = dtype.promote(t.dtype);
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data, dtype))
    }
}
