//! Dense tensors and a reverse-mode tape.
//!
//! [`Tensor`] is a plain value: a shape plus a contiguous row-major `f64`
//! buffer. Differentiability lives on the [`Tape`]: every tracked tensor is a
//! node in a growing DAG, ops append nodes, and [`Tape::backward`] walks the
//! nodes once in reverse creation order (which is a reverse topological
//! order, since an op can only consume already-existing nodes).
//!
//! Determinism rules used throughout:
//! * reductions accumulate in flat row-major index order,
//! * no parallel reductions,
//! * all accumulation happens in `f64`, even when a tape is running in
//!   32-bit mode (values are then rounded through `f32` after each op).

mod conv;
mod fd;
mod grouping;
mod tape;

pub use conv::{conv2d_output_shape, conv2d_reference};
pub use fd::{finite_diff_grad, finite_diff_hessian, max_rel_err};
pub use grouping::Grouping;
pub use tape::{Op, Precision, Tape, TensorId};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Dense N-dimensional array, row-major, `f64` storage.
///
/// A rank-0 tensor (empty shape) holds exactly one element and is used for
/// scalar losses.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` equals the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new",
                expected: format!("{numel} elements for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Standard normal fill, deterministic given the RNG state.
    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Uniform fill on `[lo, hi)`, deterministic given the RNG state.
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// The single element of a scalar tensor.
    ///
    /// Panics if the tensor has more than one element; that is a programming
    /// error, not a runtime condition.
    pub fn item(&self) -> f64 {
        assert!(
            self.data.len() == 1,
            "item() on tensor with shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::reshaped",
                expected: format!("{} elements", self.data.len()),
                got: format!("shape {shape:?} ({numel} elements)"),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }
}
