//! Dense f64 tensors, a small layer graph with reverse-mode differentiation,
//! and the Adam optimizer.
//!
//! Everything here is deterministic: reductions run in a fixed sequential
//! order, and the only parallelism (inside the convolution kernels) assigns
//! whole output elements to threads, so two runs with the same parameters
//! produce bit-identical results.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod layers;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_params, save_params};
pub use gradcheck::{check_gradients, numeric_gradient};
pub use graph::{Activations, Graph, GraphBuilder, LayerKind, Mode, NodeId};

use crate::error::{Error, Result};

/// Dense tensor of 64-bit floats, row-major.
///
/// Activations use (N, H, W, C) order; parameters use whatever layout their
/// layer documents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("{} elements for shape {:?}", len, shape),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// True when the tensor is a single element, whatever its rank.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fixed-order sequential sum of all elements.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Index into a rank-4 (N, H, W, C) tensor.
    #[inline]
    pub fn at4(&self, n: usize, h: usize, w: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 4);
        let (_, sh, sw, sc) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * sh + h) * sw + w) * sc + c]
    }

    #[inline]
    pub fn at4_mut(&mut self, n: usize, h: usize, w: usize, c: usize) -> &mut f64 {
        debug_assert_eq!(self.shape.len(), 4);
        let (_, sh, sw, sc) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        &mut self.data[((n * sh + h) * sw + w) * sc + c]
    }
}

/// Dot product with a fixed association: four independent accumulators over
/// strided quarters, combined in one order. Deterministic and vectorizable.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    ((s0 + s1) + (s2 + s3)) + tail
}

/// `out[i] += s * a[i]` over matching slices.
#[inline]
pub(crate) fn axpy(out: &mut [f64], s: f64, a: &[f64]) {
    debug_assert_eq!(out.len(), a.len());
    for (o, v) in out.iter_mut().zip(a) {
        *o += s * v;
    }
}
