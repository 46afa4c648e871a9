//! Dense row-major tensors and the numeric primitives the detector is built from.
//!
//! Storage is always `f32`. The generic kernels in [`kernels`] are also
//! instantiated at `f64`, which is what the gradient checks and verification
//! oracles run at.

pub mod grad;
pub mod io;
pub mod kernels;
mod ops;

pub use grad::{grad_check, GradCheckReport};
pub use kernels::Real;
pub use ops::{add, concat_channels, conv2d, conv2d_with, gelu, layer_norm, linear, sigmoid, softmax, ConvParams};

use crate::error::{Error, Result};

/// Dense N-dimensional array of `f32` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("dimensions must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "dimensions must be positive, got {shape:?}"
        );
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data = (0..t.data.len()).map(f).collect();
        t
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Returns the tensor with a new shape covering the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Interprets a rank-3 tensor as `(channels, height, width)`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!(
                "expected a (channels, height, width) tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Element at a multi-dimensional index. Panics when out of range.
    pub fn at(&self, index: &[usize]) -> f32 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of range for shape {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, factor: f32) -> Self {
        self.map(|x| x * factor)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies channel `c` of a `(channels, height, width)` tensor.
    pub fn channel(&self, c: usize) -> Result<Tensor> {
        let (channels, h, w) = self.dims3()?;
        if c >= channels {
            return Err(Error::invalid(format!(
                "channel {c} out of range for {channels} channels"
            )));
        }
        Tensor::new(vec![1, h, w], self.data[c * h * w..(c + 1) * h * w].to_vec())
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f32> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max),
        )
    }
}

/// A `(channels, height, width)` map tagged with its downsampling factor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, stride: usize) -> Result<Self> {
        tensor.dims3()?;
        if stride == 0 {
            return Err(Error::invalid("feature map stride must be positive"));
        }
        Ok(Self { tensor, stride })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.tensor
            .dims3()
            .expect("feature map tensors are rank 3 by construction")
    }

    pub fn channels(&self) -> usize {
        self.dims().0
    }
}
